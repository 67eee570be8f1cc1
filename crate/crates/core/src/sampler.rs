//! Direction proposals: kernels of random row submatrices of `L`, filtered by
//! the sparsity they induce in `L * q` and deduplicated into a candidate pool.
//!
//! Each sample draws its own RNG from `(seed, chunk, index)`, so a chunk's
//! output does not depend on how many threads evaluate it or in which order
//! chunks are processed.

use rand::seq::index;
use rayon::prelude::*;

use crate::analysis::solve_tau;
use crate::lowrank::sorted_svd;
use crate::rng::rng_for;
use crate::{Matrix, Real, Result, SpearError, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Total number of submatrices `N` to sample before giving up.
    pub max_samples: usize,
    pub chunk_size: usize,
    /// Explicit sparsity threshold; derived from `false_reject` when absent.
    pub tau: Option<f64>,
    /// Target probability `p_fr` of rejecting a correct direction.
    pub false_reject: f64,
    /// An entry of `v = L q` counts as zero when `|v_j| <= zero_rel_tol * rms(v)`.
    pub zero_rel_tol: f64,
    /// Noise-robust proposals from `(b+1) x b` submatrices.
    pub robust: bool,
    /// Relative singular-value threshold for "full rank" decisions.
    pub rank_rel_tol: f64,
    /// Robust mode: relative level below which the smallest singular value of a
    /// submatrix is treated as zero.
    pub noise_rank_tol: f64,
    /// Two unit directions are duplicates when `|<p, q>| >= 1 - angle_tol`.
    pub angle_tol: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            max_samples: 1_000_000,
            chunk_size: 10_000,
            tau: None,
            false_reject: 1e-5,
            zero_rel_tol: 1e-9,
            robust: false,
            rank_rel_tol: 1e-6,
            noise_rank_tol: 1e-2,
            angle_tol: 1e-6,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Defaults for gradients perturbed by DP noise.
    pub fn robust() -> Self {
        Self {
            robust: true,
            zero_rel_tol: 1e-2,
            rank_rel_tol: 1e-3,
            noise_rank_tol: 2e-2,
            angle_tol: 1e-4,
            false_reject: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(SpearError::InvalidArgument(msg.to_string()));
        if self.max_samples == 0 || self.chunk_size == 0 {
            return bad("sample budget and chunk size must be positive");
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0 && tau <= 0.5) {
                return bad("tau must lie in (0, 0.5]");
            }
        }
        if !(self.false_reject > 0.0 && self.false_reject < 1.0) {
            return bad("false-rejection target must lie in (0, 1)");
        }
        if !(self.zero_rel_tol >= 0.0) || !(self.rank_rel_tol > 0.0 && self.rank_rel_tol < 1.0) {
            return bad("tolerances out of range");
        }
        if !(self.angle_tol > 0.0 && self.angle_tol < 1.0) {
            return bad("angle tolerance must lie in (0, 1)");
        }
        Ok(())
    }

    /// Rows per sampled submatrix: `b - 1`, or `b + 1` in robust mode.
    pub fn submatrix_rows(&self, b: usize) -> usize {
        if self.robust {
            b + 1
        } else {
            b.saturating_sub(1)
        }
    }

    /// Minimum number of zeros, `ceil(tau * m)`, a candidate must induce.
    pub fn min_zeros(&self, m: usize) -> Result<usize> {
        match self.tau {
            Some(tau) => {
                let x = tau * m as f64;
                let r = x.round();
                Ok(if (x - r).abs() <= 1e-9 * x.max(1.0) { r as usize } else { x.ceil() as usize })
            }
            None => Ok(solve_tau(m as u64, self.false_reject)?.min_zeros),
        }
    }

    pub fn chunk_count(&self) -> usize {
        self.max_samples.div_ceil(self.chunk_size)
    }

    /// Samples in chunk `chunk_index`; the last chunk may be short.
    pub fn chunk_len(&self, chunk_index: usize) -> usize {
        let start = chunk_index * self.chunk_size;
        self.chunk_size.min(self.max_samples.saturating_sub(start))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionCandidate<T: Real> {
    /// Unit vector in `R^b`, largest-magnitude entry positive.
    pub direction: Vector<T>,
    /// Near-zero entries of `L * direction`.
    pub sparsity: usize,
    pub sample_index: u64,
    pub source_rows: Vec<usize>,
}

/// Flips `v` so that its largest-magnitude entry (lowest index on ties) is
/// positive.
pub fn canonicalize_sign<T: Real>(v: &mut Vector<T>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < T::zero() {
        v.neg_mut();
    }
}

/// One-dimensional kernel of a sampled submatrix `L_A`, if it exists.
///
/// Normal mode expects `b - 1` rows and rejects submatrices whose kernel has
/// dimension above one. Robust mode expects `b + 1` rows, accepts only
/// submatrices of numerical rank exactly `b - 1` and returns the least-squares
/// null direction.
pub fn kernel_direction<T: Real>(la: &Matrix<T>, cfg: &SamplerConfig) -> Option<Vector<T>> {
    let b = la.ncols();
    if b == 0 {
        return None;
    }
    if b == 1 {
        return Some(Vector::from_element(1, T::one()));
    }
    // A wide matrix is padded with zero rows so the SVD yields a full V.
    let padded;
    let square = if la.nrows() < b {
        padded = la.clone().resize_vertically(b, T::zero());
        &padded
    } else {
        la
    };
    let svd = sorted_svd(square);
    let sv = &svd.singular_values;
    let top = sv[0];
    if !(top > T::zero()) {
        return None;
    }
    if cfg.robust {
        let tol = T::lit(cfg.noise_rank_tol) * top;
        if !(sv[b - 2] > tol && sv[b - 1] <= tol) {
            return None;
        }
    } else if !(sv[b - 2] > T::lit(cfg.rank_rel_tol) * top) {
        return None;
    }
    let mut q = svd.v_t.row(b - 1).transpose();
    let norm = q.norm();
    q.unscale_mut(norm);
    canonicalize_sign(&mut q);
    Some(q)
}

/// Entries of `v = L q` with `|v_j| <= zero_rel_tol * ||v|| / sqrt(m)`.
pub fn sparsity_count<T: Real>(left: &Matrix<T>, q: &Vector<T>, zero_rel_tol: f64) -> usize {
    zero_count(&(left * q), zero_rel_tol)
}

/// Near-zero entries of a vector, relative to its RMS magnitude.
pub fn zero_count<T: Real>(v: &Vector<T>, zero_rel_tol: f64) -> usize {
    let rms = v.norm() / T::lit(v.len() as f64).sqrt();
    let cut = T::lit(zero_rel_tol) * rms;
    v.iter().filter(|x| x.abs() <= cut).count()
}

fn propose_sample<T: Real>(
    left: &Matrix<T>,
    cfg: &SamplerConfig,
    rows: usize,
    min_zeros: usize,
    chunk_index: usize,
    within: usize,
) -> Option<DirectionCandidate<T>> {
    let mut rng = rng_for(cfg.seed, &[chunk_index as u64, within as u64]);
    let mut source_rows = index::sample(&mut rng, left.nrows(), rows).into_vec();
    source_rows.sort_unstable();
    let la = left.select_rows(&source_rows);
    let direction = kernel_direction(&la, cfg)?;
    let sparsity = sparsity_count(left, &direction, cfg.zero_rel_tol);
    (sparsity >= min_zeros).then(|| DirectionCandidate {
        direction,
        sparsity,
        sample_index: (chunk_index * cfg.chunk_size + within) as u64,
        source_rows,
    })
}

/// Evaluates one chunk of samples and keeps the candidates that pass the
/// sparsity filter, in sample order.
pub fn propose_chunk<T: Real>(left: &Matrix<T>, cfg: &SamplerConfig, chunk_index: usize) -> Result<Vec<DirectionCandidate<T>>> {
    cfg.validate()?;
    let (m, b) = left.shape();
    let rows = cfg.submatrix_rows(b);
    if m < rows || b == 0 {
        return Err(SpearError::InvalidArgument(format!("cannot sample {rows} rows from a {m}x{b} matrix")));
    }
    let min_zeros = cfg.min_zeros(m)?;
    Ok((0..cfg.chunk_len(chunk_index))
        .into_par_iter()
        .filter_map(|j| propose_sample(left, cfg, rows, min_zeros, chunk_index, j))
        .collect())
}

/// Deduplicated candidate directions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidatePool<T: Real> {
    pub candidates: Vec<DirectionCandidate<T>>,
}

impl<T: Real> CandidatePool<T> {
    pub fn new() -> Self {
        Self { candidates: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Index of a kept candidate parallel to `q`, if any.
    pub fn find(&self, q: &Vector<T>, angle_tol: f64) -> Option<usize> {
        let limit = T::one() - T::lit(angle_tol);
        self.candidates.iter().position(|c| c.direction.dot(q).abs() >= limit)
    }

    /// Greedy merge: a candidate is kept iff it is not parallel to a kept one;
    /// duplicates only raise the kept candidate's sparsity. Returns the number
    /// of new entries.
    pub fn merge(&mut self, incoming: impl IntoIterator<Item = DirectionCandidate<T>>, angle_tol: f64) -> usize {
        let before = self.len();
        for c in incoming {
            match self.find(&c.direction, angle_tol) {
                Some(i) => {
                    let kept = &mut self.candidates[i];
                    kept.sparsity = kept.sparsity.max(c.sparsity);
                }
                None => self.candidates.push(c),
            }
        }
        self.len() - before
    }

    /// Pool directions as the columns of a `b x c` matrix.
    pub fn direction_matrix(&self) -> Matrix<T> {
        let cols: Vec<Vector<T>> = self.candidates.iter().map(|c| c.direction.clone()).collect();
        Matrix::from_columns(&cols)
    }
}

pub fn dedup<T: Real>(candidates: Vec<DirectionCandidate<T>>, angle_tol: f64) -> CandidatePool<T> {
    let mut pool = CandidatePool::new();
    pool.merge(candidates, angle_tol);
    pool
}

/// Samples chunk by chunk until every column of `truth` (unit directions) has
/// been proposed and returns the number of samples that took, i.e. one past
/// the latest first-hit sample index. `None` if the budget runs out.
pub fn samples_to_complete_pool<T: Real>(
    left: &Matrix<T>,
    truth: &Matrix<T>,
    cfg: &SamplerConfig,
    match_tol: f64,
) -> Result<Option<u64>> {
    let b = truth.ncols();
    let limit = T::one() - T::lit(match_tol);
    let mut first_hit: Vec<Option<u64>> = vec![None; b];
    for chunk in 0..cfg.chunk_count() {
        for c in propose_chunk(left, cfg, chunk)? {
            for (i, col) in truth.column_iter().enumerate() {
                if first_hit[i].is_none() && c.direction.dot(&col).abs() >= limit {
                    first_hit[i] = Some(c.sample_index);
                }
            }
        }
        if first_hit.iter().all(Option::is_some) {
            return Ok(first_hit.iter().flatten().max().map(|&i| i + 1));
        }
    }
    Ok(None)
}
