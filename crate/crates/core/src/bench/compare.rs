use std::fmt::Write;

use crate::bench::config::RunConfig;
use crate::bench::run::{run, RunOutput, RunReport};
use crate::error::{Error, Result};

/// Fixed column set of `compare.csv`.
pub const COMPARE_COLUMNS: [&str; 5] = ["method", "workers", "peak_device_bytes", "tokens_per_sec", "speedup_vs_first"];

/// One CSV row per report; speedups are relative to the first row. Reports
/// for different model configurations are refused.
pub fn compare_reports(reports: &[RunReport]) -> Result<String> {
    if reports.len() < 2 {
        return Err(Error::Config(format!("compare needs at least 2 runs, got {}", reports.len())));
    }
    let first = &reports[0];
    if let Some(bad) = reports.iter().position(|r| r.model != first.model) {
        return Err(Error::Config(format!(
            "run {bad} uses model {:?} but run 0 uses {:?}; only like-for-like runs can be compared",
            reports[bad].model, first.model
        )));
    }
    let mut csv = COMPARE_COLUMNS.join(",");
    csv.push('\n');
    for r in reports {
        let speedup = if first.tokens_per_sec > 0.0 {
            r.tokens_per_sec / first.tokens_per_sec
        } else {
            f64::NAN
        };
        writeln!(
            csv,
            "{},{},{},{:.3},{:.4}",
            r.method, r.workers, r.peak_device_bytes, r.tokens_per_sec, speedup
        )
        .expect("writing to a String");
    }
    Ok(csv)
}

/// Run every config, then tabulate. Model mismatches are caught before
/// anything runs.
pub fn compare(configs: &[RunConfig]) -> Result<(Vec<RunOutput>, String)> {
    if configs.len() < 2 {
        return Err(Error::Config(format!("compare needs at least 2 configs, got {}", configs.len())));
    }
    if let Some(bad) = configs.iter().position(|c| c.model != configs[0].model) {
        return Err(Error::Config(format!(
            "config {bad} has a different model than config 0; only like-for-like runs can be compared"
        )));
    }
    for c in configs {
        c.validate()?;
    }
    let outputs = configs.iter().map(run).collect::<Result<Vec<_>>>()?;
    let reports: Vec<RunReport> = outputs.iter().map(|o| o.report.clone()).collect();
    let csv = compare_reports(&reports)?;
    Ok((outputs, csv))
}
