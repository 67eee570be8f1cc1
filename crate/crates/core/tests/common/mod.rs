#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use spear::fcnn::{self, Backprop, Batch, ForwardTrace, NetworkParams};
use spear::rng::rng_for;
use spear::Matrix;

pub struct Problem {
    pub net: NetworkParams<f64>,
    pub batch: Batch<f64>,
    pub trace: ForwardTrace<f64>,
    pub backprop: Backprop<f64>,
}

pub fn gaussian_batch(n: usize, b: usize, classes: usize, seed: u64) -> Batch<f64> {
    let mut rng = rng_for(seed, &[0xba7c]);
    let x = Matrix::from_fn(n, b, |_, _| StandardNormal.sample(&mut rng));
    let labels = (0..b).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(x, labels).unwrap()
}

/// Network `dims[0] -> ... -> dims[k]` at initialization with a Gaussian batch.
pub fn problem(dims: &[usize], b: usize, seed: u64) -> Problem {
    let net = fcnn::init_network(&fcnn::layer_chain(dims), seed).unwrap();
    let batch = gaussian_batch(dims[0], b, *dims.last().unwrap(), seed);
    let (trace, backprop) = fcnn::batch_gradients(&net, &batch).unwrap();
    Problem { net, batch, trace, backprop }
}

/// Greedy max-|cos| matching of recovered columns to true columns; returns
/// the max abs error after matching.
pub fn matched_max_error(recovered: &Matrix<f64>, truth: &Matrix<f64>) -> f64 {
    let b = truth.ncols();
    if recovered.ncols() != b {
        return f64::INFINITY;
    }
    let mut pairs = Vec::new();
    for i in 0..b {
        for j in 0..b {
            let c = recovered.column(i).dot(&truth.column(j)).abs()
                / (recovered.column(i).norm() * truth.column(j).norm()).max(1e-300);
            pairs.push((c, i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut used_r, mut used_t) = (vec![false; b], vec![false; b]);
    let mut err: f64 = 0.0;
    for (_, i, j) in pairs {
        if !used_r[i] && !used_t[j] {
            used_r[i] = true;
            used_t[j] = true;
            err = err.max((recovered.column(i) - truth.column(j)).amax());
        }
    }
    err
}
