//! Report files. `summary.json` and `trials.csv` are pure functions of the
//! config and seed; wall times go to `timing.json` so the other two stay
//! byte-identical across runs and worker counts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::experiment::TrialOutcome;
use crate::metrics::{median, percentile};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub b: usize,
    pub inferred_b: usize,
    pub recovered: bool,
    pub converged: bool,
    pub max_abs_error: Option<f64>,
    pub mae: Option<f64>,
    pub relative_mae: Option<f64>,
    pub psnr: Option<f64>,
    pub lambda: Option<f64>,
    pub mismatches: Option<usize>,
    pub ill_conditioned: bool,
    pub samples_used: usize,
    pub pool_size: usize,
}

impl From<&TrialOutcome> for TrialRow {
    fn from(t: &TrialOutcome) -> Self {
        Self {
            trial: t.trial,
            seed: t.seed,
            b: t.batch_size,
            inferred_b: t.inferred_batch_size,
            recovered: t.recovered,
            converged: t.converged,
            max_abs_error: t.metrics.map(|m| m.max_abs_error),
            mae: t.metrics.map(|m| m.mae),
            relative_mae: t.metrics.map(|m| m.relative_mae),
            psnr: t.metrics.and_then(|m| m.psnr),
            lambda: t.lambda,
            mismatches: t.mismatches,
            ill_conditioned: t.ill_conditioned,
            samples_used: t.samples_used,
            pool_size: t.pool_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spread {
    pub median: Option<f64>,
    pub p10: Option<f64>,
    pub p90: Option<f64>,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        Self { median: median(values), p10: percentile(values, 10.0), p90: percentile(values, 90.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub config: BTreeMap<String, String>,
    pub trials: usize,
    pub recovered: usize,
    /// `recovered / trials`.
    pub accuracy: f64,
    /// Max abs error below which a trial counts as recovered.
    pub recovery_threshold: f64,
    pub converged: usize,
    pub max_abs_error: Spread,
    pub relative_mae: Spread,
    /// Relative MAE over recovered trials only.
    pub relative_mae_recovered: Spread,
    pub psnr: Spread,
    pub lambda: Spread,
    pub samples_used: Spread,
    pub pool_size: Spread,
}

pub fn summarize(config: &[(String, String)], trials: &[TrialOutcome], recovery_threshold: f64) -> Summary {
    let pick = |f: &dyn Fn(&TrialOutcome) -> Option<f64>| trials.iter().filter_map(f).collect::<Vec<_>>();
    let recovered = trials.iter().filter(|t| t.recovered).count();
    Summary {
        config: config.iter().cloned().collect(),
        trials: trials.len(),
        recovered,
        accuracy: if trials.is_empty() { 0.0 } else { recovered as f64 / trials.len() as f64 },
        recovery_threshold,
        converged: trials.iter().filter(|t| t.converged).count(),
        max_abs_error: Spread::of(&pick(&|t| t.metrics.map(|m| m.max_abs_error))),
        relative_mae: Spread::of(&pick(&|t| t.metrics.map(|m| m.relative_mae))),
        relative_mae_recovered: Spread::of(&pick(&|t| t.metrics.filter(|_| t.recovered).map(|m| m.relative_mae))),
        psnr: Spread::of(&pick(&|t| t.metrics.and_then(|m| m.psnr))),
        lambda: Spread::of(&pick(&|t| t.lambda)),
        samples_used: Spread::of(&pick(&|t| Some(t.samples_used as f64))),
        pool_size: Spread::of(&pick(&|t| Some(t.pool_size as f64))),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Timing {
    total_seconds: f64,
    trial_seconds: Vec<f64>,
}

/// Writes `summary.json`, `trials.csv` and `timing.json` under `dir`.
pub fn write_attack_report(dir: &Path, summary: &Summary, trials: &[TrialOutcome], total_seconds: f64) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("summary.json"), summary)?;
    write_csv(&dir.join("trials.csv"), trials.iter().map(TrialRow::from))?;
    let timing = Timing { total_seconds, trial_seconds: trials.iter().map(|t| t.wall_seconds).collect() };
    write_json(&dir.join("timing.json"), &timing)
}
