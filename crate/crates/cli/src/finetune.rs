use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use xtab_core::fedpretrain::{client_seed, Checkpoint};
use xtab_core::finetune::{run_trial, InitSource};
use xtab_core::metrics::MetricRecord;
use xtab_core::tensor::Float;
use xtab_core::Result;

use crate::config::ExperimentConfig;

pub const RESULTS_FILE: &str = "results.jsonl";

/// Label that groups records of one model in reports.
pub fn model_label(checkpoint: Option<&Checkpoint>) -> String {
    match checkpoint {
        None => "random".into(),
        Some(ck) => format!("xtab@{}", ck.meta.rounds),
    }
}

/// Model seed of a (task, trial) pair; shared by paired runs.
pub fn trial_seed(seed: u64, task: usize, trial: u64) -> u64 {
    client_seed(seed ^ trial.wrapping_mul(0xD1B5_4A32_D192_ED03), task)
}

/// Appends records as whole lines.
pub fn append_records(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Runs `cfg.trials` trials on every table, plus a random-init twin of each
/// checkpoint run when `cfg.with_baseline` is set, and appends the records
/// to `out/results.jsonl`. Trial `t` uses test fold `t`.
pub fn cmd_finetune<F: Float>(cfg: &ExperimentConfig, init: &InitSource, out: &Path) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let datasets = cfg.datasets.load()?;
    let checkpoint = match init {
        InitSource::Random => None,
        InitSource::Checkpoint(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_compatible(&cfg.backbone)?;
            Some(ck)
        }
    };
    let mut runs: Vec<(Option<&Checkpoint>, String)> = vec![(checkpoint.as_ref(), init.label())];
    if cfg.with_baseline && checkpoint.is_some() {
        runs.push((None, InitSource::Random.label()));
    }
    let mut jobs: Vec<(usize, u64, usize)> = Vec::new();
    for task in 0..datasets.len() {
        for trial in 0..cfg.trials as u64 {
            jobs.extend((0..runs.len()).map(|run| (task, trial, run)));
        }
    }
    let hash = cfg.hash();
    let records = jobs
        .par_iter()
        .map(|&(task, trial, run)| {
            let (ck, init_label) = &runs[run];
            let seed = trial_seed(cfg.seed, task, trial);
            let result = run_trial::<F>(&datasets[task], trial, &cfg.backbone, &cfg.finetune, *ck, seed)?;
            Ok(result.to_record(&model_label(*ck), cfg.finetune.regime, init_label, &hash, cfg.finetune.train_fraction))
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;
    append_records(&out.join(RESULTS_FILE), &records)?;
    Ok(records)
}
