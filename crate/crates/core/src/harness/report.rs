use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spec::ExperimentSpec;
use crate::error::{Error, Result};
use crate::policies::PolicyKind;

pub const CSV_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Lambda attached to one report cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaSetting {
    /// The policy takes no lambda.
    Unused,
    Oracle,
    Fixed(f64),
}

impl LambdaSetting {
    pub fn label(&self) -> String {
        match self {
            LambdaSetting::Unused => "-".into(),
            LambdaSetting::Oracle => "oracle".into(),
            LambdaSetting::Fixed(v) => v.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentInfo {
    pub index: usize,
    pub seed: u64,
    /// Number of subpopulations with a positive effect.
    pub positives: usize,
    /// Lambda used by `oracle` cells in this environment.
    pub oracle_lambda: Option<f64>,
    /// Set when the oracle was undefined and the fallback was used.
    pub lambda_note: Option<String>,
}

/// Metrics of one (policy, lambda, environment) cell, averaged over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentRow {
    pub policy: PolicyKind,
    pub lambda_setting: LambdaSetting,
    pub environment_index: usize,
    pub environment_seed: u64,
    pub regime: String,
    pub horizon: usize,
    pub lambda: Option<f64>,
    pub fpr: Option<f64>,
    pub tpr: Option<f64>,
    pub alloc: Option<f64>,
    /// Completed runs.
    pub runs: usize,
    pub failures: usize,
    pub first_failure: Option<String>,
}

/// Mean of per-environment values with the standard error of that mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    /// Sample standard deviation of the environment means over √n.
    pub standard_error: Option<f64>,
    pub environments: usize,
}

impl Aggregate {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Aggregate {
                mean: None,
                standard_error: None,
                environments: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Aggregate {
            mean: Some(mean),
            standard_error: Some(se),
            environments: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub policy: PolicyKind,
    pub lambda_setting: LambdaSetting,
    pub fpr: Aggregate,
    pub tpr: Aggregate,
    pub alloc: Aggregate,
    pub failed_runs: usize,
}

impl CellSummary {
    pub fn from_rows(policy: PolicyKind, lambda_setting: LambdaSetting, rows: &[EnvironmentRow]) -> Self {
        let mine: Vec<&EnvironmentRow> = rows
            .iter()
            .filter(|r| r.policy == policy && r.lambda_setting == lambda_setting)
            .collect();
        let collect = |f: fn(&EnvironmentRow) -> Option<f64>| -> Vec<f64> { mine.iter().filter_map(|r| f(r)).collect() };
        CellSummary {
            policy,
            fpr: Aggregate::from_values(&collect(|r| r.fpr)),
            tpr: Aggregate::from_values(&collect(|r| r.tpr)),
            alloc: Aggregate::from_values(&collect(|r| r.alloc)),
            failed_runs: mine.iter().map(|r| r.failures).sum(),
            lambda_setting,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub environments: Vec<EnvironmentInfo>,
    pub rows: Vec<EnvironmentRow>,
    pub summaries: Vec<CellSummary>,
    pub wall_clock_secs: f64,
}

impl ExperimentReport {
    pub fn summary(&self, policy: PolicyKind, lambda: &LambdaSetting) -> Option<&CellSummary> {
        self.summaries
            .iter()
            .find(|s| s.policy == policy && &s.lambda_setting == lambda)
    }

    /// First summary for `policy`, whatever its lambda.
    pub fn policy_summary(&self, policy: PolicyKind) -> Option<&CellSummary> {
        self.summaries.iter().find(|s| s.policy == policy)
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    policy: &'a str,
    environment_seed: u64,
    regime: &'a str,
    #[serde(rename = "H")]
    horizon: usize,
    lambda: Option<f64>,
    fpr: Option<f64>,
    tpr: Option<f64>,
    alloc: Option<f64>,
}

/// Writes the per-environment rows as CSV. Output depends only on the rows,
/// never on timing.
pub fn write_csv<W: io::Write>(report: &ExperimentReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in &report.rows {
        w.serialize(CsvRow {
            policy: row.policy.name(),
            environment_seed: row.environment_seed,
            regime: &row.regime,
            horizon: row.horizon,
            lambda: row.lambda,
            fpr: row.fpr,
            tpr: row.tpr,
            alloc: row.alloc,
        })?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Writes `results.csv` and `summary.json` into `dir`, creating it if needed.
pub fn write_outputs(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(CSV_FILE);
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_csv(report, io::BufWriter::new(file))?;

    let json_path = dir.join(SUMMARY_FILE);
    let mut doc = serde_json::to_value(report)?;
    doc["error_bars"] = "standard error over environment means".into();
    let text = serde_json::to_string_pretty(&doc)?;
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

pub fn load_summary(dir: impl AsRef<Path>) -> Result<ExperimentReport> {
    let path = dir.as_ref().join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(map) = doc.as_object_mut() {
        map.remove("error_bars");
    }
    Ok(serde_json::from_value(doc)?)
}

fn pct(a: &Aggregate) -> String {
    match (a.mean, a.standard_error) {
        (Some(m), Some(se)) => format!("{:.1}% ({:.1}%)", 100.0 * m, 100.0 * se),
        _ => "n/a".into(),
    }
}

/// Plain-text comparison table, one line per (policy, lambda) cell.
pub fn render_table(report: &ExperimentReport) -> String {
    let spec = &report.spec;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "K={} T={} D_x={} D_z={} regime={} H={} envs={} runs/env={} seed={}",
        spec.sim.subpopulations,
        spec.sim.periods,
        spec.sim.feature_dim,
        spec.sim.effective_factor_dim(),
        spec.regime_label(),
        spec.horizon,
        spec.n_environments,
        spec.n_runs_per_environment,
        spec.sim.seed,
    );
    let _ = writeln!(
        out,
        "{:<22} {:>8} {:>15} {:>15} {:>15} {:>7}",
        "policy", "lambda", "FPR", "TPR", "treated", "failed"
    );
    for s in &report.summaries {
        let _ = writeln!(
            out,
            "{:<22} {:>8} {:>15} {:>15} {:>15} {:>7}",
            s.policy.label(),
            s.lambda_setting.label(),
            pct(&s.fpr),
            pct(&s.tpr),
            pct(&s.alloc),
            s.failed_runs
        );
    }
    let _ = writeln!(out, "(parenthesised: standard error over environment means)");
    for env in report.environments.iter().filter_map(|e| e.lambda_note.as_ref().map(|n| (e.index, n))) {
        let _ = writeln!(out, "environment {}: {}", env.0, env.1);
    }
    let _ = writeln!(out, "wall clock: {:.1}s", report.wall_clock_secs);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_uses_sample_sd_over_root_n() {
        let a = Aggregate::from_values(&[0.1, 0.2, 0.3, 0.4]);
        let mean = 0.25;
        let sd = ((0.0225 + 0.0025 + 0.0025 + 0.0225) / 3.0_f64).sqrt();
        assert!((a.mean.unwrap() - mean).abs() < 1e-15);
        assert!((a.standard_error.unwrap() - sd / 2.0).abs() < 1e-15);
        assert_eq!(Aggregate::from_values(&[0.7]).standard_error, Some(0.0));
        assert_eq!(Aggregate::from_values(&[]).mean, None);
    }
}
