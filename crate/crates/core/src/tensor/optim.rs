use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

use super::{Float, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient step `w <- w - lr * g`.
    Sgd,
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::AdamW, lr: 1e-4, weight_decay: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, lr, weight_decay: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("weight decay must be >= 0 and betas in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Moment buffers and step counter, aligned with a [`ParamSet`] by position.
#[derive(Clone, Debug)]
pub struct OptimizerState<F> {
    pub config: OptimizerConfig,
    step: u64,
    moments: Vec<(Vec<F>, Vec<F>)>,
}

impl<F: Float> OptimizerState<F> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter and clears the gradients.
    pub fn step(&mut self, params: &mut ParamSet<F>) -> Result<()> {
        let cfg = self.config;
        for (name, p) in params.iter() {
            if p.tensor.requires_grad() && p.tensor.grad().is_none() {
                return Err(Error::Usage(format!("parameter `{name}` has no gradient")));
            }
        }
        if self.moments.is_empty() && cfg.kind == OptimizerKind::AdamW {
            self.moments = params
                .iter()
                .map(|(_, p)| (vec![F::zero(); p.tensor.numel()], vec![F::zero(); p.tensor.numel()]))
                .collect();
        }
        if cfg.kind == OptimizerKind::AdamW && self.moments.len() != params.len() {
            return Err(shape_err!("optimizer tracks {} tensors, set has {}", self.moments.len(), params.len()));
        }
        self.step += 1;

        let lr = F::of(cfg.lr);
        let decay_factor = F::of(1.0 - cfg.lr * cfg.weight_decay);
        let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - cfg.beta1), F::of(1.0 - cfg.beta2));
        let bc1 = F::of(1.0 - cfg.beta1.powi(self.step as i32));
        let bc2 = F::of(1.0 - cfg.beta2.powi(self.step as i32));
        let eps = F::of(cfg.eps);

        for (i, (name, p)) in params.iter_mut().enumerate() {
            if !p.tensor.requires_grad() {
                continue;
            }
            let grad = p.tensor.take_grad().expect("checked above");
            let apply_decay = p.decay && cfg.weight_decay > 0.0;
            let w = p.tensor.data_mut();
            if apply_decay {
                w.iter_mut().for_each(|v| *v *= decay_factor);
            }
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (v, &g) in w.iter_mut().zip(&grad) {
                        *v -= lr * g;
                    }
                }
                OptimizerKind::AdamW => {
                    let (m, s) = &mut self.moments[i];
                    if m.len() != w.len() {
                        return Err(shape_err!("moment buffer for `{name}` has wrong length"));
                    }
                    for j in 0..w.len() {
                        let g = grad[j];
                        m[j] = b1 * m[j] + one_b1 * g;
                        s[j] = b2 * s[j] + one_b2 * g * g;
                        let m_hat = m[j] / bc1;
                        let s_hat = s[j] / bc2;
                        w[j] -= lr * m_hat / (s_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
