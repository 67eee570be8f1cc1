//! Low-rank factorization of a weight gradient and the exact reconstruction
//! algebra around it.
//!
//! A weight gradient `dW = dZ * X^T` has rank at most `b`. Any full-rank
//! factorization `dW = L * R` is related to the true one by an invertible
//! `b x b` matrix `Q`: `dZ = L * Q` and `X^T = Q^-1 * R`. Here `L = U S^1/2`
//! and `R = S^1/2 V^T` come from the reduced SVD, so the columns of `L` are
//! orthogonal with squared norms equal to the singular values.

use nalgebra::SVD;

use crate::error::shape_err;
use crate::{Matrix, Real, Result, SpearError, Vector};

/// Default relative threshold deciding the numerical rank of `dW`.
pub const DEFAULT_RANK_REL_TOL: f64 = 1e-6;

/// Above this condition number a disaggregation matrix is flagged.
pub const CONDITION_WARNING: f64 = 1e12;

/// Thin SVD with singular values sorted in non-increasing order.
pub struct SortedSvd<T: Real> {
    pub u: Matrix<T>,
    pub singular_values: Vector<T>,
    pub v_t: Matrix<T>,
}

pub fn sorted_svd<T: Real>(m: &Matrix<T>) -> SortedSvd<T> {
    let (u, sv, v_t) = T::thin_svd(m).unwrap_or_else(|| {
        let svd = SVD::new(m.clone(), true, true);
        (svd.u.expect("requested U"), svd.singular_values, svd.v_t.expect("requested V^T"))
    });
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap_or(std::cmp::Ordering::Equal));
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return SortedSvd { u, singular_values: sv, v_t };
    }
    SortedSvd {
        u: u.select_columns(&order),
        singular_values: Vector::from_iterator(order.len(), order.iter().map(|&i| sv[i])),
        v_t: v_t.select_rows(&order),
    }
}

/// Singular values only, non-increasing.
pub fn singular_values<T: Real>(m: &Matrix<T>) -> Vector<T> {
    sorted_svd(m).singular_values
}

/// Numerical rank with a threshold relative to the largest singular value.
pub fn numerical_rank<T: Real>(m: &Matrix<T>, rel_tol: T) -> usize {
    let sv = singular_values(m);
    match sv.iter().next() {
        Some(&top) if top > T::zero() => sv.iter().filter(|&&s| s > rel_tol * top).count(),
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors<T: Real> {
    /// `m x b`, orthogonal columns.
    pub left: Matrix<T>,
    /// `b x n`
    pub right: Matrix<T>,
    /// All `min(m, n)` singular values of `dW`, non-increasing.
    pub singular_values: Vector<T>,
    /// Numerical rank of `dW`, i.e. the inferred batch size.
    pub batch_size: usize,
}

impl<T: Real> LowRankFactors<T> {
    pub fn product(&self) -> Matrix<T> {
        &self.left * &self.right
    }
}

/// Factorizes `dW` via reduced SVD and infers the batch size as the number of
/// singular values above `rank_rel_tol * sigma_1`.
pub fn decompose<T: Real>(dw: &Matrix<T>, rank_rel_tol: T) -> Result<LowRankFactors<T>> {
    if !(rank_rel_tol > T::zero() && rank_rel_tol < T::one()) {
        return Err(SpearError::InvalidArgument("rank tolerance must lie in (0, 1)".into()));
    }
    if dw.is_empty() {
        return shape_err("empty weight gradient");
    }
    if dw.iter().any(|v| !v.is_finite()) {
        return Err(SpearError::InvalidArgument("weight gradient has non-finite entries".into()));
    }
    let svd = sorted_svd(dw);
    let top = svd.singular_values[0];
    if top <= T::zero() {
        return Err(SpearError::Degenerate("weight gradient is identically zero".into()));
    }
    let b = svd.singular_values.iter().filter(|&&s| s > rank_rel_tol * top).count();
    let root = svd.singular_values.rows(0, b).map(|s| s.sqrt());
    let mut left = svd.u.columns(0, b).into_owned();
    let mut right = svd.v_t.rows(0, b).into_owned();
    for (i, &r) in root.iter().enumerate() {
        left.column_mut(i).scale_mut(r);
        right.row_mut(i).scale_mut(r);
    }
    Ok(LowRankFactors { left, right, singular_values: svd.singular_values, batch_size: b })
}

/// Left inverse of a matrix with mutually orthogonal columns:
/// `diag(1 / ||l_i||^2) * L^T`.
pub fn orthogonal_left_inverse<T: Real>(left: &Matrix<T>) -> Result<Matrix<T>> {
    let mut inv = left.transpose();
    for (i, col) in left.column_iter().enumerate() {
        let sq = col.norm_squared();
        if sq <= T::zero() {
            return Err(SpearError::Degenerate(format!("column {i} of L is zero")));
        }
        inv.row_mut(i).scale_mut(T::one() / sq);
    }
    Ok(inv)
}

/// Ratio of smallest to largest singular value (0 for an empty or zero matrix).
pub fn inverse_condition<T: Real>(m: &Matrix<T>) -> T {
    let sv = singular_values(m);
    match (sv.iter().next(), sv.iter().last()) {
        (Some(&hi), Some(&lo)) if hi > T::zero() => lo / hi,
        _ => T::zero(),
    }
}

fn solve_square<T: Real>(a: &Matrix<T>, rhs: &Matrix<T>, what: &str) -> Result<Matrix<T>> {
    if !a.is_square() || a.nrows() != rhs.nrows() {
        return shape_err(format!("{what}: incompatible shapes {:?} and {:?}", a.shape(), rhs.shape()));
    }
    let rcond = inverse_condition(a);
    if rcond <= T::eps() * T::lit(a.nrows() as f64) {
        return Err(SpearError::Singular(format!("{what} is numerically singular (1/cond = {})", rcond.as_f64())));
    }
    a.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| SpearError::Singular(format!("{what} is singular")))
}

/// Recovers the column scales `s = Qbar^-1 * L^-L * db` that turn unit
/// directions into the true disaggregation matrix `Q = Qbar * diag(s)`.
pub fn recover_scales<T: Real>(directions: &Matrix<T>, left: &Matrix<T>, bias_grad: &Vector<T>) -> Result<Vector<T>> {
    let b = left.ncols();
    if directions.shape() != (b, b) {
        return shape_err(format!("directions are {:?}, expected {b}x{b}", directions.shape()));
    }
    if bias_grad.len() != left.nrows() {
        return shape_err(format!("bias gradient has length {}, L has {} rows", bias_grad.len(), left.nrows()));
    }
    let projected = orthogonal_left_inverse(left)? * bias_grad;
    let rhs = Matrix::from_column_slice(b, 1, projected.as_slice());
    let s = solve_square(directions, &rhs, "direction matrix")?;
    Ok(s.column(0).into_owned())
}

/// `Q = Qbar * diag(s)` together with its unit-norm directions and scales.
#[derive(Debug, Clone, PartialEq)]
pub struct DisaggregationMatrix<T: Real> {
    pub directions: Matrix<T>,
    pub scales: Vector<T>,
    pub matrix: Matrix<T>,
}

impl<T: Real> DisaggregationMatrix<T> {
    /// Scales unit directions using the bias gradient.
    pub fn from_directions(directions: Matrix<T>, left: &Matrix<T>, bias_grad: &Vector<T>) -> Result<Self> {
        let scales = recover_scales(&directions, left, bias_grad)?;
        let mut matrix = directions.clone();
        for (i, &s) in scales.iter().enumerate() {
            matrix.column_mut(i).scale_mut(s);
        }
        Ok(Self { directions, scales, matrix })
    }

    /// Splits an already scaled `Q` into unit directions and column norms.
    pub fn from_matrix(matrix: Matrix<T>) -> Result<Self> {
        let mut directions = matrix.clone();
        let mut scales = Vector::zeros(matrix.ncols());
        for (i, mut col) in directions.column_iter_mut().enumerate() {
            let norm = col.norm();
            if norm <= T::zero() {
                return Err(SpearError::Singular(format!("column {i} of Q is zero")));
            }
            col.unscale_mut(norm);
            scales[i] = norm;
        }
        Ok(Self { directions, scales, matrix })
    }

    pub fn size(&self) -> usize {
        self.matrix.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction<T: Real> {
    /// `n x b` reconstructed inputs.
    pub inputs: Matrix<T>,
    /// `m x b` reconstructed `dL/dZ`.
    pub output_grads: Matrix<T>,
    pub condition_number: T,
    /// Set when `Q` is technically invertible but badly conditioned.
    pub ill_conditioned: bool,
}

/// `X'^T = Q^-1 * R` and `dZ' = L * Q`.
pub fn reconstruct<T: Real>(q: &DisaggregationMatrix<T>, factors: &LowRankFactors<T>) -> Result<Reconstruction<T>> {
    if q.size() != factors.batch_size {
        return shape_err(format!("Q is {0}x{0} but the factors have rank {1}", q.size(), factors.batch_size));
    }
    let xt = solve_square(&q.matrix, &factors.right, "disaggregation matrix")?;
    let rcond = inverse_condition(&q.matrix);
    let condition_number = T::one() / rcond;
    Ok(Reconstruction {
        inputs: xt.transpose(),
        output_grads: &factors.left * &q.matrix,
        condition_number,
        ill_conditioned: condition_number.as_f64() > CONDITION_WARNING,
    })
}

/// The true `Q = L^-L * dZ` for a known output gradient (simulator side only).
pub fn ground_truth_q<T: Real>(factors: &LowRankFactors<T>, output_grads: &Matrix<T>) -> Result<Matrix<T>> {
    if output_grads.nrows() != factors.left.nrows() {
        return shape_err("dL/dZ and L disagree on the number of rows");
    }
    Ok(orthogonal_left_inverse(&factors.left)? * output_grads)
}
