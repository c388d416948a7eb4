use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::{metrics_row, run_experiment, METRICS_HEADER};
use crate::distill::RunReport;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    CfgScale,
    Stage1Fraction,
    Strategy,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::CfgScale => "distill.cfg_scale",
            SweepAxis::Stage1Fraction => "distill.stage1_fraction",
            SweepAxis::Strategy => "distill.strategy",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::CfgScale => "cfg_scale",
            SweepAxis::Stage1Fraction => "stage1_fraction",
            SweepAxis::Strategy => "strategy",
        }
    }

    /// Default values: guidance scales `{5, 10, 19, 30}`, Stage-1 shares
    /// `{1.0, 0.8, 0.6, 0.3, 0.0}`, and the three distillation strategies.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::CfgScale => &["5", "10", "19", "30"],
            SweepAxis::Stage1Fraction => &["1.0", "0.8", "0.6", "0.3", "0.0"],
            SweepAxis::Strategy => &["stage1_only", "progressive", "stage2_only"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cfg_scale" => Ok(SweepAxis::CfgScale),
            "stage1_fraction" => Ok(SweepAxis::Stage1Fraction),
            "strategy" => Ok(SweepAxis::Strategy),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?} (cfg_scale, stage1_fraction, strategy)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
}

/// Outcome of one cell of the sweep.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub value: String,
    pub seed: u64,
    pub result: std::result::Result<RunReport, String>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub runs: Vec<SweepRun>,
    /// Path of the aggregated CSV.
    pub summary: PathBuf,
}

pub const SWEEP_HEADER: [&str; 15] = [
    "axis",
    "value",
    "runs",
    "failed",
    "psnr_mean",
    "psnr_std",
    "ssim_mean",
    "ssim_std",
    "mse_mean",
    "mse_std",
    "perceptual_mean",
    "perceptual_std",
    "leakage_mean",
    "leakage_std",
    "iterations_mean",
];

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Runs every `(value, seed)` pair on the current thread pool, each in its own
/// subdirectory, and writes `runs.csv` plus the per-value `sweep.csv`. Failed runs
/// keep their row with the error message; the others are still aggregated.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepOutcome> {
    if spec.values.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let root = spec.base.output.dir.clone();
    std::fs::create_dir_all(&root).map_err(|source| Error::Write { path: root.clone(), source })?;

    let mut cells = Vec::new();
    for value in &spec.values {
        for &seed in &spec.seeds {
            let mut cfg = spec.base.with_override(&format!("{}={}", spec.axis.key(), json_value(value)))?;
            cfg.seed = seed;
            cfg.output.dir = root.join(format!("{}={value}", spec.axis.name())).join(format!("seed{seed}"));
            cfg.output.run_id = format!("{}={value}-seed{seed}", spec.axis.name());
            cfg.validate()?;
            cells.push((value.clone(), seed, cfg));
        }
    }
    let runs: Vec<SweepRun> = cells
        .into_par_iter()
        .map(|(value, seed, cfg)| SweepRun {
            value,
            seed,
            result: run_experiment(&cfg).map(|a| a.report).map_err(|e| e.to_string()),
        })
        .collect();

    let mut w = csv::Writer::from_path(root.join("runs.csv"))?;
    let mut header: Vec<&str> = METRICS_HEADER.to_vec();
    header.push("status");
    w.write_record(&header)?;
    for r in &runs {
        let run_id = format!("{}={}-seed{}", spec.axis.name(), r.value, r.seed);
        match &r.result {
            Ok(rep) => {
                let mut row = metrics_row(&run_id, rep);
                row.push("ok".into());
                w.write_record(&row)?;
            }
            Err(msg) => {
                let mut row = vec![run_id, String::new(), r.seed.to_string()];
                row.resize(METRICS_HEADER.len(), String::new());
                row.push(format!("failed: {msg}"));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;

    let summary = root.join("sweep.csv");
    let mut w = csv::Writer::from_path(&summary)?;
    w.write_record(SWEEP_HEADER)?;
    for value in &spec.values {
        let cell: Vec<&SweepRun> = runs.iter().filter(|r| &r.value == value).collect();
        let ok: Vec<&RunReport> = cell.iter().filter_map(|r| r.result.as_ref().ok()).collect();
        let stat = |f: &dyn Fn(&RunReport) -> f64| mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        let mut row = vec![
            spec.axis.name().to_string(),
            value.clone(),
            cell.len().to_string(),
            (cell.len() - ok.len()).to_string(),
        ];
        for f in [
            &(|r: &RunReport| r.metrics.psnr) as &dyn Fn(&RunReport) -> f64,
            &|r: &RunReport| r.metrics.ssim,
            &|r: &RunReport| r.metrics.mse,
            &|r: &RunReport| r.metrics.perceptual,
            &|r: &RunReport| r.leakage,
        ] {
            let (m, s) = stat(f);
            row.push(m.to_string());
            row.push(s.to_string());
        }
        row.push(stat(&|r: &RunReport| r.iterations as f64).0.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(SweepOutcome { runs, summary })
}

/// Quotes non-numeric axis values so they parse as JSON strings.
fn json_value(v: &str) -> String {
    if serde_json::from_str::<serde_json::Value>(v).is_ok() {
        v.to_string()
    } else {
        format!("\"{v}\"")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn default_value_counts() {
        assert_eq!(SweepAxis::CfgScale.default_values().len(), 4);
        assert_eq!(SweepAxis::Stage1Fraction.default_values().len(), 5);
    }
}
