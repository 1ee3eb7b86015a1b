//! Task metrics and cross-model aggregation (win rate, ranks, normalized
//! scores, error reduction).

mod aggregate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::TaskType;
use crate::error::{Error, Result};

pub use aggregate::{aggregate, read_records, write_trial_csv, AggregateReport, ModelSummary, TrialRow};

/// Version stamped into every [`MetricRecord`].
pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// Probability clip used by [`log_loss`].
pub const LOG_LOSS_CLIP: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::HigherBetter => a > b,
            Direction::LowerBetter => a < b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Auc,
    Logloss,
    Rmse,
}

impl MetricKind {
    pub fn for_task(task: TaskType) -> Self {
        match task {
            TaskType::Binary => MetricKind::Auc,
            TaskType::Multiclass => MetricKind::Logloss,
            TaskType::Regression => MetricKind::Rmse,
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            MetricKind::Auc => Direction::HigherBetter,
            MetricKind::Logloss | MetricKind::Rmse => Direction::LowerBetter,
        }
    }

    /// Error form used for error reduction: `1 - AUC`, otherwise the value.
    pub fn error(self, value: f64) -> f64 {
        match self {
            MetricKind::Auc => 1.0 - value,
            MetricKind::Logloss | MetricKind::Rmse => value,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Auc => "auc",
            MetricKind::Logloss => "logloss",
            MetricKind::Rmse => "rmse",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auc" => Ok(MetricKind::Auc),
            "logloss" => Ok(MetricKind::Logloss),
            "rmse" => Ok(MetricKind::Rmse),
            other => Err(Error::Metric(format!("unknown metric `{other}`"))),
        }
    }
}

/// One finetuning trial's test score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub schema_version: u32,
    pub task: String,
    pub trial: u64,
    /// Model label used for grouping, e.g. `random` or `xtab@500`.
    pub model: String,
    pub regime: String,
    pub init: String,
    pub metric: MetricKind,
    pub value: f64,
    pub direction: Direction,
    pub config_hash: String,
    pub train_fraction: f64,
    pub wall_clock_secs: f64,
}

impl MetricRecord {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RECORD_SCHEMA_VERSION {
            return Err(Error::Metric(format!(
                "record schema version {} (expected {RECORD_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.direction != self.metric.direction() {
            return Err(Error::Metric(format!("{} record has the wrong direction", self.metric)));
        }
        let ok = match self.metric {
            MetricKind::Auc => (0.0..=1.0).contains(&self.value),
            MetricKind::Logloss | MetricKind::Rmse => self.value >= 0.0 && self.value.is_finite(),
        };
        if !ok {
            return Err(Error::Metric(format!("{} value {} out of range", self.metric, self.value)));
        }
        Ok(())
    }
}

/// Area under the ROC curve, `(concordant + 0.5 * tied) / (n1 * n0)`.
///
/// Computed from tie-averaged ranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let n1 = labels.iter().filter(|&&l| l).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::Metric("AUC is undefined when only one class is present".into()));
    }
    let ranks = average_ranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n1 as f64 * n0 as f64))
}

/// Ascending 1-based ranks; equal values share the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        order[i..=j].iter().for_each(|&k| ranks[k] = mean);
        i = j + 1;
    }
    ranks
}

/// Mean negative log probability of the true class; `probs` is row-major
/// `[labels.len(), n_classes]`.
pub fn log_loss(probs: &[f64], n_classes: usize, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || n_classes == 0 || probs.len() != labels.len() * n_classes {
        return Err(Error::Metric(format!(
            "{} probabilities for {} rows of {n_classes} classes",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &y) in probs.chunks(n_classes).zip(labels) {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Metric(format!("malformed probability row {row:?}")));
        }
        if y >= n_classes {
            return Err(Error::Metric(format!("label {y} out of range for {n_classes} classes")));
        }
        total -= row[y].clamp(LOG_LOSS_CLIP, 1.0 - LOG_LOSS_CLIP).ln();
    }
    Ok(total / labels.len() as f64)
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Metric(format!(
            "rmse needs equal non-empty inputs, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let mse = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / preds.len() as f64;
    Ok(mse.sqrt())
}

/// Ranks within one trial, best = 1, ties averaged.
pub fn rank_models(values: &[f64], direction: Direction) -> Vec<f64> {
    let keyed: Vec<f64> = match direction {
        Direction::HigherBetter => values.iter().map(|v| -v).collect(),
        Direction::LowerBetter => values.to_vec(),
    };
    average_ranks(&keyed)
}

/// Fraction of paired trials won by `model`; ties earn half a win.
pub fn win_rate(model: &[f64], baseline: &[f64], direction: Direction) -> Result<f64> {
    if model.is_empty() || model.len() != baseline.len() {
        return Err(Error::Metric(format!("win rate needs paired trials, got {} and {}", model.len(), baseline.len())));
    }
    let credit: f64 = model
        .iter()
        .zip(baseline)
        .map(|(&m, &b)| {
            if direction.better(m, b) {
                1.0
            } else if m == b {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(credit / model.len() as f64)
}

/// Worst model 0, best 1; a trial where all values are equal gives 0.5.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn minmax_normalize(values: &[f64], direction: Direction) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values
        .iter()
        .map(|&v| match direction {
            Direction::HigherBetter => (v - lo) / (hi - lo),
            Direction::LowerBetter => (hi - v) / (hi - lo),
        })
        .collect()
}

/// `(model_err - baseline_err) / (worst_err - best_err)`; 0 if the range is empty.
pub fn error_reduction(model_err: f64, baseline_err: f64, best_err: f64, worst_err: f64) -> f64 {
    if worst_err > best_err {
        (model_err - baseline_err) / (worst_err - best_err)
    } else {
        0.0
    }
}
