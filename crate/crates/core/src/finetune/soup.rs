use crate::error::{shape_err, Error, Result};
use crate::metrics::Direction;
use crate::tensor::{Float, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EarlyStop {
    Continue,
    Stop,
}

/// Stops once `patience` checks have passed since the best score.
///
/// Only a strict improvement counts as a new best, so a tie does not reset
/// the counter. An empty history never stops.
pub fn early_stop_check(history: &[f64], patience: usize, direction: Direction) -> EarlyStop {
    let Some(&first) = history.first() else {
        return EarlyStop::Continue;
    };
    let mut best = first;
    let mut best_at = 0;
    for (i, &s) in history.iter().enumerate().skip(1) {
        if direction.better(s, best) {
            best = s;
            best_at = i;
        }
    }
    if history.len() - 1 - best_at >= patience {
        EarlyStop::Stop
    } else {
        EarlyStop::Continue
    }
}

/// Uniform average of structurally identical parameter sets.
///
/// Each element is `a0 + sum((ai - a0) / k)` in f64, which keeps identical
/// inputs (and a single input) exact.
pub fn model_soup<F: Float>(snapshots: &[&ParamSet<F>]) -> Result<ParamSet<F>> {
    let (first, rest) = snapshots.split_first().ok_or_else(|| Error::Usage("soup of zero snapshots".into()))?;
    for s in rest {
        first.check_same_structure(s)?;
    }
    let k = snapshots.len() as f64;
    let mut out = first.snapshot();
    let names: Vec<String> = first.names().map(str::to_string).collect();
    for name in &names {
        let base = first.tensor(name)?;
        let mut acc = vec![0.0f64; base.numel()];
        for s in rest {
            let t = s.tensor(name)?;
            for ((a, &x), &b) in acc.iter_mut().zip(t.data()).zip(base.data()) {
                *a += (x.as_f64() - b.as_f64()) / k;
            }
        }
        let data: Vec<F> = base.data().iter().zip(&acc).map(|(&b, &a)| F::of(b.as_f64() + a)).collect();
        let mean = Tensor::new(base.shape().to_vec(), data).map_err(|e| shape_err!("soup of `{name}`: {e}"))?;
        out.assign(name, &mean)?;
    }
    Ok(out)
}

/// Snapshot kept by [`CheckpointPool`].
#[derive(Clone, Debug)]
pub struct PoolEntry<F> {
    pub score: f64,
    /// Position of the validation check that produced it.
    pub check: usize,
    pub params: ParamSet<F>,
}

/// The `capacity` best snapshots by validation score, best first.
/// Equal scores keep the earlier snapshot ahead.
#[derive(Clone, Debug)]
pub struct CheckpointPool<F> {
    capacity: usize,
    direction: Direction,
    entries: Vec<PoolEntry<F>>,
}

impl<F: Float> CheckpointPool<F> {
    pub fn new(capacity: usize, direction: Direction) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("checkpoint pool needs capacity >= 1".into()));
        }
        Ok(Self { capacity, direction, entries: Vec::with_capacity(capacity + 1) })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry<F>] {
        &self.entries
    }

    /// Whether a snapshot scoring `score` would be kept.
    pub fn admits(&self, score: f64) -> bool {
        self.entries.len() < self.capacity || self.entries.last().is_some_and(|w| self.direction.better(score, w.score))
    }

    /// Offers a snapshot; `params` is only called when it is kept.
    pub fn offer(&mut self, score: f64, check: usize, params: impl FnOnce() -> ParamSet<F>) {
        if !score.is_finite() || !self.admits(score) {
            return;
        }
        let pos = self.entries.iter().position(|e| self.direction.better(score, e.score)).unwrap_or(self.entries.len());
        self.entries.insert(pos, PoolEntry { score, check, params: params() });
        self.entries.truncate(self.capacity);
    }

    pub fn best(&self) -> Option<&PoolEntry<F>> {
        self.entries.first()
    }

    /// Uniform soup of every retained snapshot.
    pub fn soup(&self) -> Result<ParamSet<F>> {
        let sets: Vec<&ParamSet<F>> = self.entries.iter().map(|e| &e.params).collect();
        model_soup(&sets)
    }
}
