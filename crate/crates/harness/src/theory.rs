//! Theory checks: sampling cost and failure probability against their
//! predictions, and pure tables of the analytical quantities.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use spear::analysis::{self, clopper_pearson};
use spear::fcnn;
use spear::lowrank::{decompose, ground_truth_q};
use spear::rng::derive_seed;
use spear::sampler::samples_to_complete_pool;

use crate::config::ExperimentConfig;
use crate::experiment::{gaussian_batch, with_pool};
use crate::report::write_csv;

/// Classes of the throwaway head used for sampling-cost problems.
const CLASSES: usize = 10;

/// Samples until every true direction of one random problem was proposed;
/// `None` if the budget ran out first.
pub fn samples_for_problem(cfg: &ExperimentConfig, b: usize, m: usize, seed: u64) -> Result<Option<u64>> {
    let t = &cfg.theory;
    let net = fcnn::init_network::<f64>(&fcnn::layer_chain(&[t.sample_input_dim, m, CLASSES]), derive_seed(seed, &[1]))?;
    let batch = gaussian_batch(t.sample_input_dim, b, CLASSES, derive_seed(seed, &[2]));
    let (_, bp) = fcnn::batch_gradients(&net, &batch)?;
    let s = cfg.sampler();
    let factors = decompose(&bp.gradients.layers[0].weight, s.rank_rel_tol)?;
    if factors.batch_size != b {
        return Ok(None);
    }
    let mut truth = ground_truth_q(&factors, &bp.output_grads[0])?;
    for mut c in truth.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    let mut scfg = s.clone();
    scfg.max_samples = t.sample_budget;
    scfg.seed = derive_seed(seed, &[3]);
    Ok(samples_to_complete_pool(&factors.left, &truth, &scfg, 1e-6)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleTrial {
    pub b: usize,
    pub m: usize,
    pub trial: usize,
    pub samples: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryRow {
    pub experiment: &'static str,
    pub b: usize,
    pub m: usize,
    pub trials: usize,
    /// `b H_b / q` for sampling cost, the union bound for failure.
    pub predicted: f64,
    /// Median samples, or the observed failure rate.
    pub empirical: Option<f64>,
    pub ratio: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// Independence approximation of the failure probability.
    pub approx: Option<f64>,
}

/// Median counting exhausted budgets as infinite.
fn censored_median(samples: &[Option<u64>]) -> Option<f64> {
    let mut v: Vec<f64> = samples.iter().map(|s| s.map_or(f64::INFINITY, |x| x as f64)).collect();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k == 0 {
        return None;
    }
    let mid = if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) };
    mid.is_finite().then_some(mid)
}

pub fn sample_cost(cfg: &ExperimentConfig) -> Result<(Vec<TheoryRow>, Vec<SampleTrial>)> {
    let t = &cfg.theory;
    let mut rows = Vec::new();
    let mut per_trial = Vec::new();
    for &b in &t.sample_b {
        for &m in &t.sample_m {
            let predicted = analysis::expected_samples(b)?;
            let samples = (0..t.sample_trials)
                .into_par_iter()
                .map(|i| samples_for_problem(cfg, b, m, derive_seed(cfg.seed, &[0x5a, b as u64, m as u64, i as u64])))
                .collect::<Result<Vec<_>>>()?;
            let med = censored_median(&samples);
            rows.push(TheoryRow {
                experiment: "samples",
                b,
                m,
                trials: t.sample_trials,
                predicted,
                empirical: med,
                ratio: med.map(|x| x / predicted),
                ci_low: None,
                ci_high: None,
                approx: None,
            });
            per_trial.extend(samples.into_iter().enumerate().map(|(trial, samples)| SampleTrial { b, m, trial, samples }));
        }
    }
    Ok((rows, per_trial))
}

pub fn failure_rates(cfg: &ExperimentConfig) -> Result<Vec<TheoryRow>> {
    let t = &cfg.theory;
    let mut rows = Vec::new();
    for &b in &t.failure_b {
        for &m in &t.failure_m {
            let seed = derive_seed(cfg.seed, &[0xf0, b as u64, m as u64]);
            let emp = analysis::validate_failure_empirically(b, m, t.failure_trials, seed, t.failure_p_fr)?;
            let bound = analysis::failure_prob_bounds(b, m, t.failure_p_fr)?;
            let (lo, hi) = clopper_pearson(emp.failures, emp.trials, 0.95);
            rows.push(TheoryRow {
                experiment: "failure",
                b,
                m,
                trials: emp.trials,
                predicted: bound.upper,
                empirical: Some(emp.rate),
                ratio: (bound.upper > 0.0).then(|| emp.rate / bound.upper),
                ci_low: Some(lo),
                ci_high: Some(hi),
                approx: Some(bound.approx),
            });
        }
    }
    Ok(rows)
}

/// Writes `theory.csv` and `sample_trials.csv` and returns the tidy rows.
pub fn validate_theory(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<TheoryRow>> {
    let ((mut rows, per_trial), failure) = with_pool(cfg.threads, || -> Result<_> { Ok((sample_cost(cfg)?, failure_rates(cfg)?)) })??;
    rows.extend(failure);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&out.join("theory.csv"), &rows)?;
    write_csv(&out.join("sample_trials.csv"), &per_trial)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleTableRow {
    pub b: usize,
    pub q: f64,
    pub expected: f64,
    pub asymptotic: f64,
    /// Samples for failure probability `analyze_p`, ignoring false rejection.
    pub high_prob: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureTableRow {
    pub b: usize,
    pub m: usize,
    pub tau: f64,
    pub min_zeros: usize,
    pub p_ub: f64,
    pub p_approx: f64,
}

/// Pure theory tables; no sampling.
pub fn analyze(cfg: &ExperimentConfig, out: &Path) -> Result<(Vec<SampleTableRow>, Vec<FailureTableRow>)> {
    let t = &cfg.theory;
    let p_fr = cfg.sampler().false_reject;
    let samples = t
        .analyze_b
        .iter()
        .map(|&b| {
            Ok(SampleTableRow {
                b,
                q: analysis::success_prob_lower(b)?,
                expected: analysis::expected_samples(b)?,
                asymptotic: analysis::expected_samples_asymptotic(b)?,
                high_prob: analysis::high_prob_samples(b, t.analyze_p, 0.0)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut failure = Vec::new();
    for &b in &t.analyze_b {
        for &m in t.analyze_m.iter().filter(|&&m| m >= b) {
            let tau = analysis::solve_tau(m as u64, p_fr)?;
            let f = analysis::failure_prob_bounds(b, m, p_fr)?;
            failure.push(FailureTableRow { b, m, tau: tau.tau, min_zeros: tau.min_zeros, p_ub: f.upper, p_approx: f.approx });
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&out.join("analysis_samples.csv"), &samples)?;
    write_csv(&out.join("analysis_failure.csv"), &failure)?;
    Ok((samples, failure))
}
