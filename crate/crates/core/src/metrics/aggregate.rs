use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{error_reduction, minmax_normalize, rank_models, win_rate, Direction, MetricKind, MetricRecord};
use crate::error::{Error, Result};

/// Per-trial scores of one model, as written to the ranks CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub task: String,
    pub trial: u64,
    pub model: String,
    pub metric: MetricKind,
    pub value: f64,
    pub rank: f64,
    pub normalized: f64,
    pub error_reduction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub n_trials: usize,
    pub win_rate: f64,
    pub mean_rank: f64,
    /// Population standard deviation of the per-trial ranks.
    pub rank_std: f64,
    pub mean_normalized: f64,
    pub mean_error_reduction: f64,
    pub median_error_reduction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub baseline: String,
    pub models: Vec<ModelSummary>,
    /// Trials holding a record for every model.
    pub n_trials: usize,
    /// Trials dropped because some model was missing.
    pub skipped_trials: usize,
    pub rows: Vec<TrialRow>,
}

impl AggregateReport {
    pub fn summary(&self, model: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.model == model)
    }
}

/// Reads a line-delimited results file, validating every record.
pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Data { path: path.to_path_buf(), message: e.to_string() })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: MetricRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data { path: path.to_path_buf(), message: format!("line {}: {e}", i + 1) })?;
        rec.validate()
            .map_err(|e| Error::Data { path: path.to_path_buf(), message: format!("line {}: {e}", i + 1) })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Data { path: path.to_path_buf(), message: "no records".into() });
    }
    Ok(out)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Aggregates records over trials, keyed by `(task, trial)`.
///
/// Every model is compared with `baseline`. Trials missing any model are
/// skipped so all statistics use the same trial set.
pub fn aggregate(records: &[MetricRecord], baseline: &str) -> Result<AggregateReport> {
    if records.is_empty() {
        return Err(Error::Metric("no records".into()));
    }
    let models: Vec<String> = records.iter().map(|r| r.model.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if !models.iter().any(|m| m == baseline) {
        return Err(Error::Metric(format!("baseline `{baseline}` has no records")));
    }
    if models.len() < 2 {
        return Err(Error::Metric("aggregation needs at least two models".into()));
    }
    let mut trials: BTreeMap<(String, u64), BTreeMap<String, &MetricRecord>> = BTreeMap::new();
    for r in records {
        let slot = trials.entry((r.task.clone(), r.trial)).or_default();
        if slot.insert(r.model.clone(), r).is_some() {
            return Err(Error::Metric(format!("duplicate record for {} trial {} model {}", r.task, r.trial, r.model)));
        }
    }

    let mut rows = Vec::new();
    let mut values: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    let (mut n_trials, mut skipped) = (0, 0);
    for ((task, trial), by_model) in &trials {
        if by_model.len() != models.len() {
            skipped += 1;
            continue;
        }
        let recs: Vec<&MetricRecord> = models.iter().map(|m| by_model[m]).collect();
        let metric = recs[0].metric;
        if recs.iter().any(|r| r.metric != metric) {
            return Err(Error::Metric(format!("mixed metrics in {task} trial {trial}")));
        }
        n_trials += 1;
        let dir = metric.direction();
        let vals: Vec<f64> = recs.iter().map(|r| r.value).collect();
        let ranks = rank_models(&vals, dir);
        let norm = minmax_normalize(&vals, dir);
        let errs: Vec<f64> = vals.iter().map(|&v| metric.error(v)).collect();
        let best = errs.iter().copied().fold(f64::INFINITY, f64::min);
        let worst = errs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let base_err = errs[models.iter().position(|m| m == baseline).expect("checked")];
        for (i, m) in models.iter().enumerate() {
            let er = error_reduction(errs[i], base_err, best, worst);
            // Values are stored as "higher is better" so win rate uses one direction.
            let signed = if dir == Direction::HigherBetter { vals[i] } else { -vals[i] };
            values.entry(m).or_default().push((signed, er));
            rows.push(TrialRow {
                task: task.clone(),
                trial: *trial,
                model: m.clone(),
                metric,
                value: vals[i],
                rank: ranks[i],
                normalized: norm[i],
                error_reduction: er,
            });
        }
    }
    if n_trials == 0 {
        return Err(Error::Metric("no trial has a record for every model".into()));
    }

    let base_signed: Vec<f64> = values[baseline].iter().map(|v| v.0).collect();
    let mut summaries = Vec::with_capacity(models.len());
    for m in &models {
        let mine: Vec<&TrialRow> = rows.iter().filter(|r| &r.model == m).collect();
        let n = mine.len() as f64;
        let mean_rank = mine.iter().map(|r| r.rank).sum::<f64>() / n;
        let rank_std = (mine.iter().map(|r| (r.rank - mean_rank).powi(2)).sum::<f64>() / n).sqrt();
        let ers: Vec<f64> = values[m.as_str()].iter().map(|v| v.1).collect();
        let signed: Vec<f64> = values[m.as_str()].iter().map(|v| v.0).collect();
        summaries.push(ModelSummary {
            model: m.clone(),
            n_trials: mine.len(),
            win_rate: win_rate(&signed, &base_signed, Direction::HigherBetter)?,
            mean_rank,
            rank_std,
            mean_normalized: mine.iter().map(|r| r.normalized).sum::<f64>() / n,
            mean_error_reduction: ers.iter().sum::<f64>() / n,
            median_error_reduction: median(&ers),
        });
    }
    Ok(AggregateReport { baseline: baseline.to_string(), models: summaries, n_trials, skipped_trials: skipped, rows })
}

/// Flat per-trial CSV of values, ranks and normalized scores.
pub fn write_trial_csv(report: &AggregateReport, path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::Data { path: path.to_path_buf(), message: e.to_string() })?;
    for row in &report.rows {
        w.serialize(row).map_err(|e| Error::Data { path: path.to_path_buf(), message: e.to_string() })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::RECORD_SCHEMA_VERSION;

    pub(crate) fn rec(task: &str, trial: u64, model: &str, metric: MetricKind, value: f64) -> MetricRecord {
        MetricRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            task: task.into(),
            trial,
            model: model.into(),
            regime: "light".into(),
            init: "random".into(),
            metric,
            value,
            direction: metric.direction(),
            config_hash: "h".into(),
            train_fraction: 1.0,
            wall_clock_secs: 0.0,
        }
    }

    #[test]
    fn two_model_report() {
        let recs = vec![
            rec("a", 0, "random", MetricKind::Auc, 0.7),
            rec("a", 0, "xtab", MetricKind::Auc, 0.8),
            rec("b", 0, "random", MetricKind::Rmse, 1.0),
            rec("b", 0, "xtab", MetricKind::Rmse, 1.5),
            rec("b", 1, "xtab", MetricKind::Rmse, 1.5),
        ];
        let r = aggregate(&recs, "random").unwrap();
        assert_eq!((r.n_trials, r.skipped_trials), (2, 1));
        let x = r.summary("xtab").unwrap();
        assert_eq!(x.win_rate, 0.5);
        assert_eq!(x.mean_rank, 1.5);
        assert_eq!(r.summary("random").unwrap().win_rate, 0.5);
        // AUC trial: errors 0.3 (random) and 0.2 (xtab) -> -1; RMSE trial -> +1.
        assert_eq!(x.mean_error_reduction, 0.0);
    }

    #[test]
    fn duplicate_and_missing_baseline_fail() {
        let a = rec("a", 0, "m", MetricKind::Auc, 0.5);
        assert!(aggregate(&[a.clone(), a.clone()], "m").is_err());
        assert!(aggregate(&[a], "random").is_err());
        assert!(aggregate(&[], "random").is_err());
    }

    #[test]
    fn records_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("results.jsonl");
        let recs = vec![rec("a", 0, "random", MetricKind::Auc, 0.7), rec("a", 0, "x", MetricKind::Auc, 0.9)];
        let text: String = recs.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
        std::fs::write(&p, text).unwrap();
        assert_eq!(read_records(&p).unwrap(), recs);
        std::fs::write(&p, "").unwrap();
        assert!(read_records(&p).unwrap_err().to_string().contains("no records"));
        let mut old = recs[0].clone();
        old.schema_version = 0;
        std::fs::write(&p, serde_json::to_string(&old).unwrap()).unwrap();
        assert!(read_records(&p).is_err());
    }
}
