//! Selection of the final `b` directions from the candidate pool and the
//! end-to-end attack loop.
//!
//! A direction set is scored by the sparsity matching coefficient: after
//! reconstructing `X'` and `dZ'`, the pre-activations `Z' = W X' + bias` must
//! be non-positive exactly where `dZ'` vanishes. The correct set matches every
//! cell whenever `dL/dY` is dense.

use rayon::prelude::*;

use crate::lowrank::{decompose, numerical_rank, reconstruct, DisaggregationMatrix, LowRankFactors};
use crate::sampler::{propose_chunk, CandidatePool, SamplerConfig};
use crate::{Matrix, Real, Result, SpearError, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LambdaScore {
    /// Cells with `Z' <= 0` and `dZ' == 0`.
    pub lambda_minus: usize,
    /// Cells with `Z' > 0` and `dZ' != 0`.
    pub lambda_plus: usize,
    /// `m * b`.
    pub cells: usize,
}

impl LambdaScore {
    pub fn matched(&self) -> usize {
        self.lambda_minus + self.lambda_plus
    }

    pub fn mismatches(&self) -> usize {
        self.cells - self.matched()
    }

    pub fn lambda(&self) -> f64 {
        self.matched() as f64 / self.cells as f64
    }
}

/// Largest number of mismatched cells still accepted at level `accept_lambda`.
pub fn mismatch_budget(accept_lambda: f64, cells: usize) -> usize {
    ((1.0 - accept_lambda).max(0.0) * cells as f64 + 1e-9).floor() as usize
}

/// What the server observes for the attacked layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerObservation<'a, T: Real> {
    pub weight_grad: &'a Matrix<T>,
    pub bias_grad: &'a Vector<T>,
    pub weight: &'a Matrix<T>,
    pub bias: &'a Vector<T>,
}

impl<T: Real> LayerObservation<'_, T> {
    fn validate(&self) -> Result<()> {
        let (m, n) = self.weight.shape();
        if self.weight_grad.shape() != (m, n) || self.bias_grad.len() != m || self.bias.len() != m {
            return Err(SpearError::Shape(format!(
                "layer observation shapes disagree: W {:?}, dW {:?}, bias {}, db {}",
                self.weight.shape(),
                self.weight_grad.shape(),
                self.bias.len(),
                self.bias_grad.len()
            )));
        }
        Ok(())
    }
}

/// Factorization plus layer parameters needed to score direction sets.
#[derive(Debug, Clone)]
pub struct AttackContext<T: Real> {
    pub factors: LowRankFactors<T>,
    pub weight: Matrix<T>,
    pub bias: Vector<T>,
    pub bias_grad: Vector<T>,
    pub zero_rel_tol: f64,
    pub rank_rel_tol: f64,
}

impl<T: Real> AttackContext<T> {
    pub fn new(obs: &LayerObservation<'_, T>, zero_rel_tol: f64, rank_rel_tol: f64) -> Result<Self> {
        obs.validate()?;
        let factors = decompose(obs.weight_grad, T::lit(rank_rel_tol))?;
        Ok(Self {
            factors,
            weight: obs.weight.clone(),
            bias: obs.bias.clone(),
            bias_grad: obs.bias_grad.clone(),
            zero_rel_tol,
            rank_rel_tol,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.factors.batch_size
    }
}

/// A scored direction set with the reconstruction it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation<T: Real> {
    pub score: LambdaScore,
    pub q: DisaggregationMatrix<T>,
    /// `n x b`
    pub inputs: Matrix<T>,
    /// `m x b`
    pub output_grads: Matrix<T>,
    pub ill_conditioned: bool,
}

/// Scores the direction set given as the columns of `directions` (`b x b`).
pub fn compute_lambda<T: Real>(ctx: &AttackContext<T>, directions: &Matrix<T>) -> Result<Evaluation<T>> {
    let q = DisaggregationMatrix::from_directions(directions.clone(), &ctx.factors.left, &ctx.bias_grad)?;
    let rec = reconstruct(&q, &ctx.factors)?;
    let mut z = &ctx.weight * &rec.inputs;
    for mut col in z.column_iter_mut() {
        col += &ctx.bias;
    }
    let (m, b) = rec.output_grads.shape();
    let mut lambda_minus = 0;
    let mut lambda_plus = 0;
    for j in 0..b {
        let col = rec.output_grads.column(j);
        let cut = T::lit(ctx.zero_rel_tol) * col.norm() / T::lit(m as f64).sqrt();
        for i in 0..m {
            let zero = col[i].abs() <= cut;
            let positive = z[(i, j)] > T::zero();
            match (positive, zero) {
                (false, true) => lambda_minus += 1,
                (true, false) => lambda_plus += 1,
                _ => {}
            }
        }
    }
    Ok(Evaluation {
        score: LambdaScore { lambda_minus, lambda_plus, cells: m * b },
        q,
        inputs: rec.inputs,
        output_grads: rec.output_grads,
        ill_conditioned: rec.ill_conditioned,
    })
}

fn selection_matrix<T: Real>(pool: &CandidatePool<T>, selection: &[usize]) -> Matrix<T> {
    let cols: Vec<Vector<T>> = selection.iter().map(|&i| pool.candidates[i].direction.clone()).collect();
    Matrix::from_columns(&cols)
}

fn full_rank<T: Real>(m: &Matrix<T>, rel_tol: f64) -> bool {
    numerical_rank(m, T::lit(rel_tol)) == m.ncols()
}

/// Sparsest-first selection: walks the pool by decreasing sparsity (lower
/// index first on ties) and keeps a direction iff it raises the rank.
pub fn greedy_init<T: Real>(pool: &CandidatePool<T>, b: usize, rank_rel_tol: f64) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&x, &y| pool.candidates[y].sparsity.cmp(&pool.candidates[x].sparsity).then(x.cmp(&y)));
    let mut chosen = Vec::with_capacity(b);
    for i in order {
        if chosen.len() == b {
            break;
        }
        chosen.push(i);
        if !full_rank(&selection_matrix(pool, &chosen), rank_rel_tol) {
            chosen.pop();
        }
    }
    if chosen.len() < b {
        return Err(SpearError::InsufficientCandidates { found: chosen.len(), needed: b });
    }
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapOutcome<T: Real> {
    /// Pool indices of the selected directions, in column order.
    pub selection: Vec<usize>,
    pub evaluation: Evaluation<T>,
    pub swaps: usize,
    /// Score after initialization and after every applied swap.
    pub history: Vec<LambdaScore>,
}

/// Hill climbing on the matched-cell count: each round evaluates every
/// rank-preserving single swap and applies the best strict improvement.
/// Ties go to the incoming candidate with higher sparsity, then lower pool
/// index, then lower position in the selection.
pub fn greedy_swap<T: Real>(ctx: &AttackContext<T>, pool: &CandidatePool<T>, init: Vec<usize>) -> Result<SwapOutcome<T>> {
    let mut selection = init;
    let mut current = compute_lambda(ctx, &selection_matrix(pool, &selection))?;
    let mut history = vec![current.score];
    let mut swaps = 0;
    loop {
        let moves: Vec<(usize, usize)> = (0..selection.len())
            .flat_map(|pos| (0..pool.len()).map(move |j| (pos, j)))
            .filter(|(_, j)| !selection.contains(j))
            .collect();
        let evaluated: Vec<(usize, usize, Evaluation<T>)> = moves
            .par_iter()
            .map(|&(pos, j)| {
                let mut trial = selection.clone();
                trial[pos] = j;
                let dirs = selection_matrix(pool, &trial);
                if !full_rank(&dirs, ctx.rank_rel_tol) {
                    return Ok(None);
                }
                match compute_lambda(ctx, &dirs) {
                    Ok(e) => Ok(Some((pos, j, e))),
                    Err(SpearError::Singular(_)) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let best = evaluated.into_iter().fold(None::<(usize, usize, Evaluation<T>)>, |acc, cand| match acc {
            None => Some(cand),
            Some(prev) => {
                let key = |c: &(usize, usize, Evaluation<T>)| {
                    (c.2.score.matched(), pool.candidates[c.1].sparsity, std::cmp::Reverse(c.1), std::cmp::Reverse(c.0))
                };
                if key(&cand) > key(&prev) {
                    Some(cand)
                } else {
                    Some(prev)
                }
            }
        });
        match best {
            Some((pos, j, eval)) if eval.score.matched() > current.score.matched() => {
                selection[pos] = j;
                current = eval;
                history.push(current.score);
                swaps += 1;
            }
            _ => break,
        }
    }
    Ok(SwapOutcome { selection, evaluation: current, swaps, history })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub sampler: SamplerConfig,
    /// Early-stop level for the sparsity matching coefficient.
    pub accept_lambda: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { sampler: SamplerConfig::default(), accept_lambda: 1.0 - 1e-12 }
    }
}

impl AttackConfig {
    /// Looser tolerances and early stopping for noisy (DP) gradients.
    pub fn robust() -> Self {
        Self { sampler: SamplerConfig::robust(), accept_lambda: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult<T: Real> {
    pub factors: LowRankFactors<T>,
    /// Best scoring selection found, if the pool ever spanned `b` dimensions.
    pub best: Option<Evaluation<T>>,
    pub samples_used: usize,
    pub pool_size: usize,
    pub converged: bool,
    /// Greedy selection runs performed.
    pub greedy_runs: usize,
}

impl<T: Real> ReconstructionResult<T> {
    pub fn batch_size(&self) -> usize {
        self.factors.batch_size
    }

    pub fn inputs(&self) -> Option<&Matrix<T>> {
        self.best.as_ref().map(|e| &e.inputs)
    }

    pub fn score(&self) -> Option<LambdaScore> {
        self.best.as_ref().map(|e| e.score)
    }
}

/// Runs the full attack on one layer: factorize, then sample chunks, grow the
/// candidate pool and rerun greedy selection whenever the pool grows, until
/// the score reaches `accept_lambda` or the sample budget is spent.
pub fn run_attack<T: Real>(obs: &LayerObservation<'_, T>, cfg: &AttackConfig) -> Result<ReconstructionResult<T>> {
    let scfg = &cfg.sampler;
    scfg.validate()?;
    let ctx = AttackContext::new(obs, scfg.zero_rel_tol, scfg.rank_rel_tol)?;
    let b = ctx.batch_size();
    let m = ctx.factors.left.nrows();
    let budget = mismatch_budget(cfg.accept_lambda, m * b);

    if b == 1 {
        let eval = compute_lambda(&ctx, &Matrix::from_element(1, 1, T::one()))?;
        let converged = eval.score.mismatches() <= budget;
        return Ok(ReconstructionResult {
            factors: ctx.factors,
            best: Some(eval),
            samples_used: 0,
            pool_size: 1,
            converged,
            greedy_runs: 0,
        });
    }
    if m < scfg.submatrix_rows(b) {
        return Err(SpearError::InvalidArgument(format!(
            "layer width {m} too small for {}-row submatrices",
            scfg.submatrix_rows(b)
        )));
    }

    let mut pool = CandidatePool::new();
    let mut best: Option<Evaluation<T>> = None;
    let mut samples_used = 0;
    let mut greedy_runs = 0;
    for chunk in 0..scfg.chunk_count() {
        let fresh = pool.merge(propose_chunk(&ctx.factors.left, scfg, chunk)?, scfg.angle_tol);
        samples_used += scfg.chunk_len(chunk);
        if fresh == 0 || pool.len() < b {
            continue;
        }
        let init = match greedy_init(&pool, b, scfg.rank_rel_tol) {
            Ok(init) => init,
            Err(SpearError::InsufficientCandidates { .. }) => continue,
            Err(e) => return Err(e),
        };
        let outcome = greedy_swap(&ctx, &pool, init)?;
        greedy_runs += 1;
        let done = outcome.evaluation.score.mismatches() <= budget;
        if best.as_ref().is_none_or(|b| outcome.evaluation.score.matched() > b.score.matched()) {
            best = Some(outcome.evaluation);
        }
        if done {
            return Ok(ReconstructionResult {
                factors: ctx.factors,
                best,
                samples_used,
                pool_size: pool.len(),
                converged: true,
                greedy_runs,
            });
        }
    }
    Ok(ReconstructionResult { factors: ctx.factors, best, samples_used, pool_size: pool.len(), converged: false, greedy_runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_arithmetic() {
        let s = LambdaScore { lambda_minus: 3, lambda_plus: 4, cells: 8 };
        assert_eq!(s.matched(), 7);
        assert_eq!(s.mismatches(), 1);
        assert!((s.lambda() - 0.875).abs() < 1e-15);
    }

    #[test]
    fn acceptance_budget_is_integral() {
        assert_eq!(mismatch_budget(1.0 - 1e-12, 512), 0);
        assert_eq!(mismatch_budget(1.0, 512), 0);
        assert_eq!(mismatch_budget(0.99, 500), 5);
    }
}
