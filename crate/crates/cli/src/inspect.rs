use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xtab_core::fedpretrain::{Checkpoint, CheckpointMeta};
use xtab_core::model::BackboneConfig;
use xtab_core::Result;

pub const DEFAULT_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

/// Equal-width bins over `[min, max]`; the maximum lands in the last bin.
pub fn histogram(values: &[f32], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let lo = values.iter().map(|&v| v as f64).fold(f64::INFINITY, f64::min);
    let hi = values.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0; bins];
    if values.is_empty() {
        return Histogram { lo: 0.0, hi: 0.0, counts };
    }
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let i = if width > 0.0 { (((v as f64 - lo) / width) as usize).min(bins - 1) } else { 0 };
        counts[i] += 1;
    }
    Histogram { lo, hi, counts }
}

/// Layer norms and biases are left out of weight histograms.
pub fn is_histogrammed(name: &str) -> bool {
    !(name.contains("_norm.") || name.ends_with(".bias"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSummary {
    pub name: String,
    pub shape: Vec<usize>,
    pub histogram: Option<Histogram>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inspection {
    pub backbone: BackboneConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorSummary>,
}

pub fn inspect_checkpoint(ck: &Checkpoint, bins: usize) -> Inspection {
    let tensors = ck
        .tensors
        .iter()
        .map(|(name, t)| TensorSummary {
            name: name.clone(),
            shape: t.shape().to_vec(),
            histogram: is_histogrammed(name).then(|| histogram(t.data(), bins)),
        })
        .collect();
    Inspection { backbone: ck.backbone, meta: ck.meta.clone(), tensors }
}

pub fn cmd_inspect(path: &Path, bins: usize) -> Result<Inspection> {
    Ok(inspect_checkpoint(&Checkpoint::load(path)?, bins))
}

impl fmt::Display for Inspection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = &self.backbone;
        writeln!(f, "backbone {} blocks={} d={} heads={}", b.variant, b.n_blocks, b.d, b.n_heads)?;
        let objectives: Vec<&str> = self.meta.objectives.iter().map(|o| o.as_str()).collect();
        writeln!(
            f,
            "rounds={} seed={} share_mode={} objectives={} config={}",
            self.meta.rounds,
            self.meta.seed,
            self.meta.share_mode,
            objectives.join(","),
            self.meta.config_hash
        )?;
        writeln!(f, "{} tensors", self.tensors.len())?;
        for t in &self.tensors {
            writeln!(f, "  {} {:?}", t.name, t.shape)?;
        }
        for t in &self.tensors {
            if let Some(h) = &t.histogram {
                let peak = h.counts.iter().copied().max().unwrap_or(0).max(1);
                writeln!(f, "\n{} range [{:.4}, {:.4}]", t.name, h.lo, h.hi)?;
                let width = (h.hi - h.lo) / h.counts.len() as f64;
                for (i, &c) in h.counts.iter().enumerate() {
                    let bar = "#".repeat((c * 40).div_ceil(peak));
                    writeln!(f, "  {:>9.4} {:>7} {bar}", h.lo + width * i as f64, c)?;
                }
            }
        }
        Ok(())
    }
}
