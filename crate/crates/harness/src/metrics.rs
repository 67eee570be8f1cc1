//! Reconstruction quality after column matching.

use spear::Matrix64;

/// Greedy max-|cos| assignment. Entry `j` is the recovered column matched to
/// truth column `j`, or `None` when the recovered side ran out of columns.
pub fn match_columns(recovered: &Matrix64, truth: &Matrix64) -> Vec<Option<usize>> {
    let cos = |i: usize, j: usize| {
        let (a, b) = (recovered.column(i), truth.column(j));
        let den = a.norm() * b.norm();
        if den > 0.0 {
            (a.dot(&b) / den).abs()
        } else {
            0.0
        }
    };
    let mut pairs: Vec<(f64, usize, usize)> = (0..recovered.ncols())
        .flat_map(|i| (0..truth.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| (cos(i, j), i, j))
        .collect();
    // Stable order on ties keeps the matching deterministic.
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used = vec![false; recovered.ncols()];
    let mut assignment = vec![None; truth.ncols()];
    for (_, i, j) in pairs {
        if !used[i] && assignment[j].is_none() {
            used[i] = true;
            assignment[j] = Some(i);
        }
    }
    assignment
}

/// Recovered columns reordered to line up with `truth`. Unmatched truth
/// columns are paired with zeros.
pub fn align(recovered: &Matrix64, truth: &Matrix64) -> Matrix64 {
    let assignment = match_columns(recovered, truth);
    let mut out = Matrix64::zeros(truth.nrows(), truth.ncols());
    if recovered.nrows() != truth.nrows() {
        return out;
    }
    for (j, a) in assignment.iter().enumerate() {
        if let Some(i) = a {
            out.set_column(j, &recovered.column(*i));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub max_abs_error: f64,
    pub mae: f64,
    /// MAE over the mean absolute truth value.
    pub relative_mae: f64,
    /// `None` for an exact match (infinite PSNR).
    pub psnr: Option<f64>,
}

pub fn psnr(mse: f64, range: (f64, f64)) -> Option<f64> {
    let r = range.1 - range.0;
    (mse > 0.0).then(|| 10.0 * (r * r / mse).log10())
}

/// Metrics of `aligned` against `truth`, both already in the same order.
pub fn compare(aligned: &Matrix64, truth: &Matrix64, range: (f64, f64)) -> Metrics {
    assert_eq!(aligned.shape(), truth.shape());
    let n = truth.len().max(1) as f64;
    let diff = aligned - truth;
    let mae = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
    let mse = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let scale = truth.iter().map(|v| v.abs()).sum::<f64>() / n;
    Metrics {
        max_abs_error: diff.amax(),
        mae,
        relative_mae: if scale > 0.0 { mae / scale } else { mae },
        psnr: psnr(mse, range),
    }
}

pub fn evaluate(recovered: &Matrix64, truth: &Matrix64, range: (f64, f64)) -> Metrics {
    compare(&align(recovered, truth), truth, range)
}

/// Nearest-rank percentile of finite values; `None` when empty.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

/// Midpoint median.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    Some(if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn permuted_and_scaled_columns_are_matched() {
        let truth = dmatrix![1.0, 0.0, 2.0; 0.0, 1.0, 2.0; 1.0, 1.0, 0.0];
        let rec = dmatrix![2.0, 1.0, 0.0; 2.0, 0.0, 1.0; 0.0, 1.0, 1.0];
        assert_eq!(match_columns(&rec, &truth), vec![Some(1), Some(2), Some(0)]);
        assert_eq!(evaluate(&rec, &truth, (0.0, 1.0)).max_abs_error, 0.0);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let truth = dmatrix![0.2, 0.9, 0.1; 0.4, 0.3, 0.8; 0.6, 0.1, 0.5];
        let rec = &truth + dmatrix![1e-3, 0.0, -2e-3; 0.0, 5e-4, 0.0; 0.0, 0.0, 1e-3];
        let base = evaluate(&rec, &truth, (0.0, 1.0));
        let perm = [2usize, 0, 1];
        let shuffled = truth.select_columns(&perm);
        let again = evaluate(&rec, &shuffled, (0.0, 1.0));
        assert!((base.mae - again.mae).abs() < 1e-18);
        assert_eq!(base.max_abs_error, again.max_abs_error);
        assert_eq!(base.psnr, again.psnr);
    }

    #[test]
    fn psnr_from_declared_range() {
        assert_eq!(psnr(0.0, (0.0, 1.0)), None);
        assert!((psnr(1e-4, (0.0, 1.0)).unwrap() - 40.0).abs() < 1e-12);
        assert!((psnr(4e-4, (-1.0, 1.0)).unwrap() - 40.0).abs() < 1e-12);
    }

    #[test]
    fn missing_columns_compare_against_zero() {
        let truth = dmatrix![1.0, 0.0; 0.0, 3.0];
        let rec = dmatrix![0.0; 3.0];
        let m = evaluate(&rec, &truth, (0.0, 1.0));
        assert_eq!(m.max_abs_error, 1.0);
    }

    #[test]
    fn order_statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), Some(2.5));
        assert_eq!(median(&[f64::NAN]), None);
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0), Some(2.0));
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 100.0), Some(4.0));
    }
}
