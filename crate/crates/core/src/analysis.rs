//! Closed-form predictors for the sampling cost and failure probability of
//! the attack, and an exhaustive Monte-Carlo validator for the latter.
//!
//! The predictors assume the gradient model in which every entry of `dL/dZ`
//! is `zeta * |eps|` with `zeta ~ Bernoulli(1/2)` and `eps ~ N(0, sigma^2)`,
//! independently. Binomial quantities are evaluated in the log domain so that
//! widths in the thousands do not underflow.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{Beta, ContinuousCDF, Normal};
use statrs::function::factorial::ln_binomial;

use crate::rng::rng_for;
use crate::{Result, SpearError};

/// Published constants used by the bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryConstants {
    /// Lower-bound base for the singularity probability of random sign matrices.
    pub singularity_base: f64,
    pub euler_mascheroni: f64,
}

pub const CONSTANTS: TheoryConstants = TheoryConstants {
    singularity_base: 0.939,
    euler_mascheroni: 0.577_215_664_901_532_9,
};

/// `ln C(n, k)`; `-inf` when `k > n`.
pub fn ln_choose(n: u64, k: u64) -> f64 {
    if k > n {
        f64::NEG_INFINITY
    } else {
        ln_binomial(n, k)
    }
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `ln P(Bin(m, 1/2) <= k)`.
pub fn ln_binomial_half_cdf(m: u64, k: i64) -> f64 {
    if k < 0 {
        return f64::NEG_INFINITY;
    }
    let k = (k as u64).min(m);
    if k == m {
        return 0.0;
    }
    let ln_half_m = -(m as f64) * std::f64::consts::LN_2;
    log_sum_exp((0..=k).map(|i| ln_choose(m, i) + ln_half_m)).min(0.0)
}

pub fn binomial_half_cdf(m: u64, k: i64) -> f64 {
    ln_binomial_half_cdf(m, k).exp()
}

/// `floor(m * tau)`, tolerant of `tau = k / m` being rounded just below `k / m`.
pub fn floor_fraction(m: u64, tau: f64) -> i64 {
    let x = m as f64 * tau;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as i64
    } else {
        x.floor() as i64
    }
}

/// Probability that a correct direction, whose induced vector has
/// `Bin(m, 1/2)` zeros, is rejected by a threshold `tau`:
/// `2^-m * sum_{i <= floor(m tau)} C(m, i)`.
pub fn false_rejection_prob(tau: f64, m: u64) -> f64 {
    binomial_half_cdf(m, floor_fraction(m, tau))
}

/// Threshold chosen for a false-rejection budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauThreshold {
    pub tau: f64,
    /// Minimum number of (near-)zero entries a candidate must induce.
    pub min_zeros: usize,
    /// Set when even `k = 0` exceeds the budget (`p_fr < 2^-m`); no threshold
    /// is safe and `tau` falls back to 0.
    pub below_floor: bool,
}

/// Largest `tau = k / m` whose binomial lower tail at `k` stays within `p_fr`.
pub fn solve_tau(m: u64, p_fr: f64) -> Result<TauThreshold> {
    if m == 0 {
        return Err(SpearError::InvalidArgument("width must be positive".into()));
    }
    if !(p_fr > 0.0 && p_fr < 1.0) {
        return Err(SpearError::InvalidArgument(format!("false-rejection budget {p_fr} outside (0, 1)")));
    }
    let ln_budget = p_fr.ln();
    let ln_half_m = -(m as f64) * std::f64::consts::LN_2;
    let mut ln_cdf = f64::NEG_INFINITY;
    let mut best: Option<u64> = None;
    for k in 0..=m {
        let term = ln_choose(m, k) + ln_half_m;
        ln_cdf = if ln_cdf == f64::NEG_INFINITY {
            term
        } else {
            let (hi, lo) = if ln_cdf > term { (ln_cdf, term) } else { (term, ln_cdf) };
            hi + (lo - hi).exp().ln_1p()
        };
        if ln_cdf <= ln_budget {
            best = Some(k);
        } else {
            break;
        }
    }
    Ok(match best {
        Some(k) => TauThreshold { tau: k as f64 / m as f64, min_zeros: k as usize, below_floor: false },
        None => TauThreshold { tau: 0.0, min_zeros: 0, below_floor: true },
    })
}

fn require_batch(b: usize) -> Result<()> {
    if b < 2 {
        Err(SpearError::Unsupported(format!(
            "batch size {b}: the sampling analysis needs b >= 2 (b = 1 is solved in closed form)"
        )))
    } else {
        Ok(())
    }
}

/// Lower bound on the probability that a random `(b-1) x b` row submatrix of
/// `dL/dZ` has exactly one all-zero column and is full rank:
/// `b / 2^(b-1) * (1 - 0.939^(b-1))`.
pub fn success_prob_lower(b: usize) -> Result<f64> {
    require_batch(b)?;
    let k = (b - 1) as f64;
    Ok(b as f64 * (-k * std::f64::consts::LN_2).exp() * -(k * CONSTANTS.singularity_base.ln()).exp_m1())
}

pub fn harmonic(b: usize) -> f64 {
    (1..=b).map(|k| 1.0 / k as f64).sum()
}

/// Expected number of sampled submatrices until all `b` directions have been
/// found: `b * H_b / q` with the exact harmonic number.
pub fn expected_samples(b: usize) -> Result<f64> {
    Ok(b as f64 * harmonic(b) / success_prob_lower(b)?)
}

/// The asymptotic form `(b ln b + gamma b + 1/2) / q`.
pub fn expected_samples_asymptotic(b: usize) -> Result<f64> {
    let bf = b as f64;
    Ok((bf * bf.ln() + CONSTANTS.euler_mascheroni * bf + 0.5) / success_prob_lower(b)?)
}

/// `1 - (1 - p_fr)^b`, the probability that at least one of `b` correct
/// directions is rejected by the sparsity filter.
pub fn any_false_rejection(b: usize, p_fr: f64) -> f64 {
    if p_fr >= 1.0 {
        return 1.0;
    }
    -(b as f64 * (-p_fr).ln_1p()).exp_m1()
}

/// Number of samples after which all `b` directions are found with
/// probability at least `1 - p`, from the normal approximation of the number
/// of successful samples. The approximation is reliable for `b >= 5`.
pub fn high_prob_samples(b: usize, p: f64, p_fr: f64) -> Result<u64> {
    let q = success_prob_lower(b)?;
    if !(p > 0.0 && p < 1.0) || !(0.0..1.0).contains(&p_fr) {
        return Err(SpearError::InvalidArgument("p must lie in (0, 1) and p_fr in [0, 1)".into()));
    }
    let p_star = p - any_false_rejection(b, p_fr);
    if !(p_star > 0.0) {
        return Err(SpearError::InvalidArgument(format!(
            "false-rejection floor {} exceeds the failure budget {p}",
            any_false_rejection(b, p_fr)
        )));
    }
    let needed = b as f64 * (2.0 * b as f64 / p_star).ln();
    let z = Normal::standard().inverse_cdf(p_star / 2.0);
    // q t^2 + z sqrt(q (1 - q)) t - c = 0 with t = sqrt(n).
    let spread = z * (q * (1.0 - q)).sqrt();
    let t = (-spread + (spread * spread + 4.0 * q * needed).sqrt()) / (2.0 * q);
    Ok((t * t).ceil() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FailureEstimate {
    pub b: usize,
    pub m: usize,
    pub p_fr: f64,
    /// Union-bound upper bound, clamped to `[0, 1]`.
    pub upper: f64,
    /// Approximation assuming independent, nearly always non-singular
    /// submatrices, clamped to `[0, 1]`.
    pub approx: f64,
}

/// `P(no full-rank submatrix with an all-zero column i exists)` for a single
/// column, with `base^((b-1) C(k, b-1))` as the per-`k` miss probability.
fn column_miss_prob(b: usize, m: usize, base: f64) -> f64 {
    let ln_half_m = -(m as f64) * std::f64::consts::LN_2;
    let ln_neg_ln_base = (-base.ln()).ln();
    let mut total = 0.0;
    for k in 0..=m {
        let pmf = (ln_choose(m as u64, k as u64) + ln_half_m).exp();
        let miss = if k + 1 < b {
            1.0
        } else {
            // base^N = exp(-exp(ln N + ln(-ln base))), N = (b-1) C(k, b-1).
            let ln_n = ((b - 1) as f64).ln() + ln_choose(k as u64, (b - 1) as u64);
            (-(ln_n + ln_neg_ln_base).exp()).exp()
        };
        total += pmf * miss;
    }
    total
}

pub fn failure_prob_bounds(b: usize, m: usize, p_fr: f64) -> Result<FailureEstimate> {
    require_batch(b)?;
    if b > m {
        return Err(SpearError::InvalidArgument(format!("batch size {b} exceeds width {m}")));
    }
    if !(0.0..=1.0).contains(&p_fr) {
        return Err(SpearError::InvalidArgument(format!("p_fr {p_fr} outside [0, 1]")));
    }
    let rejection = any_false_rejection(b, p_fr);
    let upper = b as f64 * column_miss_prob(b, m, CONSTANTS.singularity_base) + rejection;
    let miss = column_miss_prob(b, m, 0.5);
    let approx = -(b as f64 * (-miss).ln_1p()).exp_m1() + rejection;
    Ok(FailureEstimate { b, m, p_fr, upper: upper.clamp(0.0, 1.0), approx: approx.clamp(0.0, 1.0) })
}

/// Two-sided Clopper-Pearson interval for `successes` out of `trials`.
pub fn clopper_pearson(successes: usize, trials: usize, confidence: f64) -> (f64, f64) {
    assert!(trials > 0 && successes <= trials);
    let alpha = 1.0 - confidence;
    let (x, n) = (successes as f64, trials as f64);
    let lower = if successes == 0 {
        0.0
    } else {
        Beta::new(x, n - x + 1.0).expect("valid beta").inverse_cdf(alpha / 2.0)
    };
    let upper = if successes == trials {
        1.0
    } else {
        Beta::new(x + 1.0, n - x).expect("valid beta").inverse_cdf(1.0 - alpha / 2.0)
    };
    (lower, upper)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalFailure {
    pub b: usize,
    pub m: usize,
    pub trials: usize,
    pub failures: usize,
    /// Trials lost to the sparsity filter alone.
    pub false_rejections: usize,
    pub rate: f64,
    /// 95% Clopper-Pearson interval.
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Submatrix enumeration is capped at this many row subsets per trial.
pub const ENUMERATION_LIMIT: f64 = 1e6;

/// Draws `dL/dZ` from the half-Gaussian times Bernoulli model.
pub fn sample_sparse_gradient<R: Rng>(m: usize, b: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| {
            (0..b)
                .map(|_| {
                    let eps: f64 = StandardNormal.sample(rng);
                    if rng.random_bool(0.5) {
                        eps.abs()
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Whether a small dense square matrix is non-singular (partial pivoting).
fn nonsingular(mut a: Vec<Vec<f64>>) -> bool {
    let n = a.len();
    let scale = a.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs()));
    if scale == 0.0 {
        return n == 0;
    }
    let tol = 1e-12 * scale;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        if a[p][c].abs() <= tol {
            return false;
        }
        a.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    true
}

/// Steps `idx` to the next `k`-combination of `0..n` in lexicographic order.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    for i in (0..k).rev() {
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Whether some `(b-1)`-row submatrix of `dz` has column `col` all zero and
/// the remaining `(b-1) x (b-1)` block non-singular. Every submatrix with an
/// all-zero column `col` draws its rows from the zero set of that column, so
/// enumerating subsets of that set covers all candidates.
pub fn column_recoverable(dz: &[Vec<f64>], col: usize) -> bool {
    let b = dz.first().map_or(0, |r| r.len());
    let k = b - 1;
    let zero_rows: Vec<usize> = (0..dz.len()).filter(|&r| dz[r][col] == 0.0).collect();
    if zero_rows.len() < k {
        return false;
    }
    if k == 0 {
        return true;
    }
    let others: Vec<usize> = (0..b).filter(|&c| c != col).collect();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        let block: Vec<Vec<f64>> = idx.iter().map(|&i| others.iter().map(|&c| dz[zero_rows[i]][c]).collect()).collect();
        if nonsingular(block) {
            return true;
        }
        if !next_combination(&mut idx, zero_rows.len()) {
            return false;
        }
    }
}

/// Estimates the attack's failure probability under exhaustive sampling:
/// a trial fails when some column of the sampled `dL/dZ` admits no suitable
/// submatrix, or is denser than the sparsity threshold derived from `p_fr`.
pub fn validate_failure_empirically(b: usize, m: usize, trials: usize, seed: u64, p_fr: f64) -> Result<EmpiricalFailure> {
    require_batch(b)?;
    if trials == 0 {
        return Err(SpearError::InvalidArgument("need at least one trial".into()));
    }
    if b > m {
        return Err(SpearError::InvalidArgument(format!("batch size {b} exceeds width {m}")));
    }
    let subsets = ln_choose(m as u64, (b - 1) as u64).exp();
    if subsets > ENUMERATION_LIMIT {
        return Err(SpearError::Intractable(format!("C({m}, {}) = {subsets:.3e} submatrices per trial", b - 1)));
    }
    let threshold = solve_tau(m as u64, p_fr)?;
    let outcomes: Vec<(bool, bool)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(seed, &[0xfa11, t as u64]);
            let dz = sample_sparse_gradient(m, b, &mut rng);
            let rejected = (0..b).any(|c| dz.iter().filter(|row| row[c] == 0.0).count() < threshold.min_zeros);
            let missing = (0..b).any(|c| !column_recoverable(&dz, c));
            (rejected || missing, rejected && !missing)
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.0).count();
    let false_rejections = outcomes.iter().filter(|o| o.1).count();
    let (ci_low, ci_high) = clopper_pearson(failures, trials, 0.95);
    Ok(EmpiricalFailure {
        b,
        m,
        trials,
        failures,
        false_rejections,
        rate: failures as f64 / trials as f64,
        ci_low,
        ci_high,
    })
}
