use std::fmt::Write;
use std::path::Path;

use xtab_core::metrics::{aggregate, read_records, write_trial_csv, AggregateReport};
use xtab_core::Result;

pub const REPORT_FILE: &str = "report.json";
pub const RANKS_FILE: &str = "ranks.csv";

/// Aggregates a results file against `baseline` and writes `report.json`
/// and `ranks.csv` into `out`.
pub fn cmd_report(results: &Path, baseline: &str, out: &Path) -> Result<AggregateReport> {
    let records = read_records(results)?;
    let report = aggregate(&records, baseline)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    write_trial_csv(&report, &out.join(RANKS_FILE))?;
    Ok(report)
}

/// Plain-text summary table.
pub fn format_report(report: &AggregateReport) -> String {
    let mut s = String::new();
    let _ =
        writeln!(s, "{} trials ({} skipped), baseline `{}`", report.n_trials, report.skipped_trials, report.baseline);
    let _ = writeln!(
        s,
        "{:<24} {:>8} {:>10} {:>10} {:>10} {:>12} {:>12}",
        "model", "trials", "win_rate", "mean_rank", "rank_std", "normalized", "err_reduct"
    );
    for m in &report.models {
        let _ = writeln!(
            s,
            "{:<24} {:>8} {:>10.4} {:>10.4} {:>10.4} {:>12.4} {:>12.4}",
            m.model, m.n_trials, m.win_rate, m.mean_rank, m.rank_std, m.mean_normalized, m.mean_error_reduction
        );
    }
    s
}
