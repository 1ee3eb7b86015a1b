//! Finetuning on a downstream table.
//!
//! The featurizer and supervised head are always freshly initialized; the
//! backbone is either random or copied from a pretraining checkpoint, and
//! every parameter is trained.

mod soup;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    split_dataset, Batch, BatchStream, PreparedTable, TableDataset, Targets, TaskType, DEFAULT_BATCH_SIZE,
};
use crate::error::{Error, Result};
use crate::fedpretrain::Checkpoint;
use crate::metrics::{auc, log_loss, rmse, MetricKind, MetricRecord, RECORD_SCHEMA_VERSION};
use crate::model::BackboneConfig;
use crate::objectives::{ObjectiveConfig, ObjectiveKind, TableModel};
use crate::tensor::{Float, Graph, OptimizerConfig, OptimizerState, ParamSet};

pub use soup::{early_stop_check, model_soup, CheckpointPool, EarlyStop, PoolEntry};

/// Safety cap on epochs for the early-stopping regimes.
pub const DEFAULT_MAX_EPOCHS: usize = 500;

const SUBSAMPLE_STREAM: u64 = 21;
const DROPOUT_STREAM: u64 = 22;
const EVAL_BATCH: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Light,
    Heavy,
    Best,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Light, Regime::Heavy, Regime::Best];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Light => "light",
            Regime::Heavy => "heavy",
            Regime::Best => "best",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}` (light, heavy, best)")))
    }
}

/// Where the backbone starts from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitSource {
    Random,
    Checkpoint(PathBuf),
}

impl InitSource {
    pub fn label(&self) -> String {
        match self {
            InitSource::Random => "random".into(),
            InitSource::Checkpoint(p) => format!("checkpoint:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub regime: Regime,
    pub train_fraction: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Validation period in epochs, 1.0 or 0.5.
    pub val_check_interval: f64,
    /// Snapshots averaged into the returned model.
    pub top_k: usize,
    /// Validation checks without strict improvement before stopping.
    pub patience: Option<usize>,
    pub max_epochs: Option<usize>,
    pub head_hidden: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::new(Regime::Light)
    }
}

impl FinetuneConfig {
    pub fn new(regime: Regime) -> Self {
        let (interval, top_k, patience, max_epochs) = match regime {
            Regime::Light => (1.0, 1, None, Some(3)),
            Regime::Heavy => (1.0, 1, Some(3), Some(DEFAULT_MAX_EPOCHS)),
            Regime::Best => (0.5, 3, Some(20), Some(DEFAULT_MAX_EPOCHS)),
        };
        Self {
            regime,
            train_fraction: 1.0,
            batch_size: DEFAULT_BATCH_SIZE,
            optimizer: OptimizerConfig::default(),
            val_check_interval: interval,
            top_k,
            patience,
            max_epochs,
            head_hidden: 192,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!("train fraction must be in (0, 1], got {}", self.train_fraction)));
        }
        if self.val_check_interval != 1.0 && self.val_check_interval != 0.5 {
            return Err(Error::Config(format!(
                "val check interval must be 1.0 or 0.5, got {}",
                self.val_check_interval
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.batch_size == 0 || self.head_hidden == 0 {
            return Err(Error::Config("batch size and head width must be positive".into()));
        }
        match (self.patience, self.max_epochs) {
            (None, None) => Err(Error::Config("training needs a patience or an epoch limit".into())),
            (Some(0), _) | (_, Some(0)) => Err(Error::Config("patience and epoch limit must be positive".into())),
            _ => Ok(()),
        }
    }

    fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig { head_hidden: self.head_hidden, ..ObjectiveConfig::new(ObjectiveKind::Supervised) }
    }
}

/// Training rows kept for a train fraction: a seeded subset of
/// `round(fraction * n)` rows (at least one), sorted.
pub fn subsample_rows(rows: &[usize], fraction: f64, seed: u64) -> Vec<usize> {
    if fraction >= 1.0 {
        return rows.to_vec();
    }
    let keep = ((fraction * rows.len() as f64).round() as usize).clamp(1.min(rows.len()), rows.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SUBSAMPLE_STREAM);
    let mut out: Vec<usize> = sample(&mut rng, rows.len(), keep).into_iter().map(|i| rows[i]).collect();
    out.sort_unstable();
    out
}

/// One validation evaluation during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValCheck {
    /// Epochs completed, e.g. 1.5 for a mid-epoch check.
    pub epoch: f64,
    pub step: usize,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome<F> {
    pub model: TableModel,
    /// The initial parameters, before any step.
    pub initial: ParamSet<F>,
    /// Best snapshot, or the soup of the top-k snapshots.
    pub params: ParamSet<F>,
    pub history: Vec<ValCheck>,
    /// Best recorded validation score.
    pub best_val: f64,
    pub epochs: usize,
    pub steps: usize,
    pub train_rows: usize,
    pub stopped_early: bool,
}

/// Builds the supervised model for `table`, optionally loading the backbone
/// from `checkpoint`. Featurizer and head draws depend only on `seed`.
pub fn init_model<F: Float>(
    table: &PreparedTable,
    backbone: &BackboneConfig,
    config: &FinetuneConfig,
    checkpoint: Option<&Checkpoint>,
    seed: u64,
) -> Result<(TableModel, ParamSet<F>)> {
    let model = TableModel::new(table, *backbone, config.objective())?;
    let mut params = model.init::<F>(seed)?;
    if let Some(ck) = checkpoint {
        ck.apply_to(backbone, &mut params)?;
    }
    Ok((model, params))
}

/// Finetunes every parameter on `table.split.train`, validating on
/// `table.split.val` at each check point.
pub fn finetune<F: Float>(
    table: &PreparedTable,
    backbone: &BackboneConfig,
    config: &FinetuneConfig,
    checkpoint: Option<&Checkpoint>,
    seed: u64,
) -> Result<FinetuneOutcome<F>> {
    config.validate()?;
    if table.split.val.is_empty() {
        return Err(Error::Dataset(format!("table `{}` has an empty validation split", table.name)));
    }
    let (model, mut params) = init_model::<F>(table, backbone, config, checkpoint, seed)?;
    let initial = params.snapshot();
    let train = subsample_rows(&table.split.train, config.train_fraction, seed);
    let stream = BatchStream::new(train.clone(), config.batch_size, true, seed)?;
    let mut optimizer = OptimizerState::new(config.optimizer);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    // Supervised loss never corrupts, but train_step takes an RNG.
    let mut unused_rng = ChaCha8Rng::seed_from_u64(seed);

    let metric = MetricKind::for_task(table.task);
    let direction = metric.direction();
    let mut pool = CheckpointPool::new(config.top_k, direction)?;
    let mut history = Vec::new();
    let mut scores = Vec::new();
    let mut steps = 0;
    let mut epochs = 0;
    let mut stopped_early = false;

    'epochs: while config.max_epochs.is_none_or(|m| epochs < m) {
        let batches = stream.epoch_batches(epochs as u64);
        let mid = if config.val_check_interval < 1.0 { batches.len().div_ceil(2) } else { batches.len() };
        for (i, rows) in batches.iter().enumerate() {
            let loss =
                model.train_step(&mut params, &mut optimizer, table, rows, dropout_rng.random(), &mut unused_rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("finetuning loss at step {steps}")));
            }
            steps += 1;
            let done = i + 1;
            if done == mid || done == batches.len() {
                let score = evaluate(&model, &params, table, &table.split.val)?;
                let epoch = epochs as f64 + done as f64 / batches.len() as f64;
                history.push(ValCheck { epoch, step: steps, score });
                scores.push(score);
                pool.offer(score, history.len() - 1, || params.snapshot());
                if let Some(p) = config.patience {
                    if early_stop_check(&scores, p, direction) == EarlyStop::Stop {
                        epochs += 1;
                        stopped_early = true;
                        break 'epochs;
                    }
                }
            }
        }
        epochs += 1;
    }

    let best = pool.best().ok_or_else(|| Error::Metric("no finite validation score was recorded".into()))?;
    let best_val = best.score;
    let params = if config.top_k == 1 { best.params.clone() } else { pool.soup()? };
    Ok(FinetuneOutcome {
        model,
        initial,
        params,
        history,
        best_val,
        epochs,
        steps,
        train_rows: train.len(),
        stopped_early,
    })
}

/// Raw head outputs for `rows`, row-major `[rows.len(), n_outputs]`.
pub fn predict_rows<F: Float>(
    model: &TableModel,
    params: &ParamSet<F>,
    table: &PreparedTable,
    rows: &[usize],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len() * model.n_outputs);
    for chunk in rows.chunks(EVAL_BATCH) {
        let batch = Batch::from_rows(table, chunk);
        let mut g = Graph::eval();
        let logits = model.predict(&mut g, params, &batch)?;
        out.extend(g.value(logits).iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

fn softmax_rows(logits: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(width) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|x| x / s));
    }
    out
}

/// Task metric on `rows` in eval mode: AUC of sigmoid scores, log loss of
/// softmax probabilities, or RMSE in original label units.
pub fn evaluate<F: Float>(
    model: &TableModel,
    params: &ParamSet<F>,
    table: &PreparedTable,
    rows: &[usize],
) -> Result<f64> {
    let outputs = predict_rows(model, params, table, rows)?;
    match (&table.targets, table.task) {
        (Targets::Classes { labels, .. }, TaskType::Binary) => {
            let probs: Vec<f64> = outputs.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
            let y: Vec<bool> = rows.iter().map(|&r| labels[r] == 1).collect();
            auc(&probs, &y)
        }
        (Targets::Classes { labels, n_classes }, TaskType::Multiclass) => {
            let probs = softmax_rows(&outputs, *n_classes);
            let y: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            log_loss(&probs, *n_classes, &y)
        }
        (Targets::Regression(y), TaskType::Regression) => {
            let label = &table.stats.label;
            let preds: Vec<f64> = outputs.iter().map(|&z| label.destandardize(z)).collect();
            let truth: Vec<f64> = rows.iter().map(|&r| label.destandardize(y[r])).collect();
            rmse(&preds, &truth)
        }
        _ => Err(Error::Usage(format!("targets do not match a {} task", table.task.as_str()))),
    }
}

/// Test-set outcome of one finetuning trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub task: String,
    pub trial: u64,
    pub metric: MetricKind,
    pub test: f64,
    pub best_val: f64,
    pub epochs: usize,
    pub steps: usize,
    pub train_rows: usize,
    pub wall_clock_secs: f64,
}

impl TrialResult {
    pub fn to_record(
        &self,
        model: &str,
        regime: Regime,
        init: &str,
        config_hash: &str,
        train_fraction: f64,
    ) -> MetricRecord {
        MetricRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            task: self.task.clone(),
            trial: self.trial,
            model: model.to_string(),
            regime: regime.as_str().to_string(),
            init: init.to_string(),
            metric: self.metric,
            value: self.test,
            direction: self.metric.direction(),
            config_hash: config_hash.to_string(),
            train_fraction,
            wall_clock_secs: self.wall_clock_secs,
        }
    }
}

/// Splits `ds` with the trial seed, finetunes and scores the test fold.
/// Model initialization uses `seed`, so runs that differ only in
/// `checkpoint` share featurizer and head draws.
pub fn run_trial<F: Float>(
    ds: &TableDataset,
    trial: u64,
    backbone: &BackboneConfig,
    config: &FinetuneConfig,
    checkpoint: Option<&Checkpoint>,
    seed: u64,
) -> Result<TrialResult> {
    let start = Instant::now();
    let table = ds.prepare(split_dataset(ds.n_rows(), trial)?)?;
    let out = finetune::<F>(&table, backbone, config, checkpoint, seed)?;
    let test = evaluate(&out.model, &out.params, &table, &table.split.test)?;
    Ok(TrialResult {
        task: ds.name.clone(),
        trial,
        metric: MetricKind::for_task(table.task),
        test,
        best_val: out.best_val,
        epochs: out.epochs,
        steps: out.steps,
        train_rows: out.train_rows,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_suite, SyntheticConfig};
    use crate::fedpretrain::{CheckpointMeta, ShareMode};
    use crate::model::BackboneVariant;

    fn small() -> BackboneConfig {
        BackboneConfig {
            variant: BackboneVariant::Ftt,
            n_blocks: 1,
            d: 8,
            n_heads: 2,
            attn_dropout: 0.0,
            ff_dropout: 0.0,
        }
    }

    fn dataset(task: TaskType, seed: u64) -> TableDataset {
        let mut cfg = SyntheticConfig::new(1, 300, 4, 3, seed);
        cfg.tasks = vec![task];
        generate_synthetic_suite(&cfg).unwrap().remove(0)
    }

    fn quick(regime: Regime) -> FinetuneConfig {
        FinetuneConfig { head_hidden: 16, batch_size: 64, ..FinetuneConfig::new(regime) }
    }

    #[test]
    fn regime_defaults() {
        let l = FinetuneConfig::new(Regime::Light);
        assert_eq!((l.max_epochs, l.patience, l.val_check_interval, l.top_k), (Some(3), None, 1.0, 1));
        let h = FinetuneConfig::new(Regime::Heavy);
        assert_eq!((h.max_epochs, h.patience, h.top_k), (Some(500), Some(3), 1));
        let b = FinetuneConfig::new(Regime::Best);
        assert_eq!((b.patience, b.val_check_interval, b.top_k), (Some(20), 0.5, 3));
        assert_eq!((l.batch_size, l.optimizer.lr), (128, 1e-4));
        assert!(FinetuneConfig { train_fraction: 0.0, ..l.clone() }.validate().is_err());
        assert!(FinetuneConfig { val_check_interval: 0.3, ..l }.validate().is_err());
    }

    #[test]
    fn light_runs_three_epochs_and_returns_best_check() {
        let ds = dataset(TaskType::Binary, 1);
        let table = ds.prepare(split_dataset(ds.n_rows(), 0).unwrap()).unwrap();
        let out = finetune::<f32>(&table, &small(), &quick(Regime::Light), None, 5).unwrap();
        assert_eq!(out.epochs, 3);
        assert_eq!(out.history.len(), 3);
        let best = out.history.iter().map(|c| c.score).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_val, best);
        assert_eq!(evaluate(&out.model, &out.params, &table, &table.split.val).unwrap(), best);
    }

    #[test]
    fn best_regime_checks_twice_per_epoch() {
        let ds = dataset(TaskType::Regression, 2);
        let table = ds.prepare(split_dataset(ds.n_rows(), 0).unwrap()).unwrap();
        let cfg = FinetuneConfig { max_epochs: Some(2), ..quick(Regime::Best) };
        let out = finetune::<f32>(&table, &small(), &cfg, None, 5).unwrap();
        let epochs: Vec<f64> = out.history.iter().map(|c| c.epoch).collect();
        assert_eq!(epochs.len(), 4);
        assert_eq!(epochs[1], 1.0);
        assert_eq!(epochs[3], 2.0);
    }

    #[test]
    fn train_fraction_subsamples() {
        let rows: Vec<usize> = (0..200).collect();
        let half = subsample_rows(&rows, 0.5, 3);
        assert_eq!(half.len(), 100);
        assert_eq!(subsample_rows(&rows, 0.25, 3).len(), 50);
        assert_eq!(half, subsample_rows(&rows, 0.5, 3));
        assert_eq!(subsample_rows(&rows, 1.0, 3), rows);
    }

    #[test]
    fn checkpoint_init_changes_only_the_backbone() {
        let ds = dataset(TaskType::Multiclass, 3);
        let table = ds.prepare(split_dataset(ds.n_rows(), 0).unwrap()).unwrap();
        let cfg = quick(Regime::Light);
        let (_, donor) = init_model::<f32>(&table, &small(), &cfg, None, 99).unwrap();
        let mut donor = donor;
        donor.set_shared_by(|n| ShareMode::BlocksOnly.is_shared(n));
        let meta = CheckpointMeta {
            rounds: 0,
            objectives: vec![],
            seed: 99,
            share_mode: ShareMode::BlocksOnly,
            config_hash: String::new(),
            attn_dropout: 0.0,
            ff_dropout: 0.0,
        };
        let ck = Checkpoint::from_params(small(), &donor, meta);
        let (_, random) = init_model::<f32>(&table, &small(), &cfg, None, 7).unwrap();
        let (_, warm) = init_model::<f32>(&table, &small(), &cfg, Some(&ck), 7).unwrap();
        for (name, p) in random.iter() {
            let same = p.tensor.data() == warm.tensor(name).unwrap().data();
            if !name.starts_with("backbone.") {
                assert!(same, "{name}");
            } else if name.ends_with(".weight") {
                assert!(!same, "{name}");
            }
            if name.starts_with("backbone.") {
                assert_eq!(warm.tensor(name).unwrap().data(), donor.tensor(name).unwrap().data());
            }
        }
        let wrong = BackboneConfig { d: 16, n_heads: 2, ..small() };
        assert!(init_model::<f32>(&table, &wrong, &cfg, Some(&ck), 7).is_err());
    }

    #[test]
    fn light_finetune_is_reproducible() {
        let ds = dataset(TaskType::Binary, 4);
        let cfg = quick(Regime::Light);
        let a = run_trial::<f32>(&ds, 1, &small(), &cfg, None, 11).unwrap();
        let b = run_trial::<f32>(&ds, 1, &small(), &cfg, None, 11).unwrap();
        assert_eq!((a.test, a.best_val, a.steps), (b.test, b.best_val, b.steps));
    }
}
