//! Federated client simulator: fully connected ReLU networks, analytic
//! gradients with a finite-difference oracle, DP-SGD clipping/noise and
//! FedAvg local updates.
//!
//! Inputs are stored as columns, so a batch of `b` examples of dimension `n`
//! is an `n x b` matrix and layer pre-activations are `Z = W X + (b | ... | b)`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::shape_err;
use crate::rng::rng_for;
use crate::{Matrix, Real, Result, SpearError, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub relu: bool,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, relu: bool) -> Self {
        Self { input_dim, output_dim, relu }
    }
}

/// Builds the layer chain `dims[0] -> dims[1] -> ... -> dims[k]` with a ReLU
/// after every layer except the last.
pub fn layer_chain(dims: &[usize]) -> Vec<LayerSpec> {
    let count = dims.len().saturating_sub(1);
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| LayerSpec::new(w[0], w[1], i + 1 < count))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Real> {
    /// `m x n`
    pub weight: Matrix<T>,
    /// length `m`
    pub bias: Vector<T>,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T: Real> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> NetworkParams<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        let params = Self { layers };
        params.validate()?;
        Ok(params)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return shape_err("network has no layers");
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let (m, n) = layer.weight.shape();
            if m == 0 || n == 0 {
                return shape_err(format!("layer {i} has an empty weight matrix"));
            }
            if layer.bias.len() != m {
                return shape_err(format!("layer {i}: bias length {} != {m}", layer.bias.len()));
            }
            if let Some(next) = self.layers.get(i + 1) {
                if next.weight.ncols() != m {
                    return shape_err(format!(
                        "layer {i} outputs {m} features but layer {} expects {}",
                        i + 1,
                        next.weight.ncols()
                    ));
                }
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(SpearError::InvalidArgument(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(())
    }
}

/// A batch of inputs stored as columns, with the class labels used to form
/// the client loss. The labels are never handed to the attack.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Real> {
    pub inputs: Matrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn new(inputs: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.ncols() == 0 {
            return shape_err("batch must contain at least one example");
        }
        if labels.len() != inputs.ncols() {
            return shape_err(format!("{} labels for {} examples", labels.len(), inputs.ncols()));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(SpearError::InvalidArgument("batch contains non-finite values".into()));
        }
        Ok(Self { inputs, labels })
    }

    pub fn size(&self) -> usize {
        self.inputs.ncols()
    }

    /// Sub-batch made of the given columns, in the given order.
    pub fn select(&self, columns: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_columns(columns),
            labels: columns.iter().map(|&c| self.labels[c]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T: Real> {
    /// `Z_l`, one `m_l x b` matrix per layer.
    pub pre_activations: Vec<Matrix<T>>,
    /// `Y_l = relu(Z_l)` for ReLU layers, `Z_l` otherwise.
    pub activations: Vec<Matrix<T>>,
    /// Mean cross-entropy over the batch.
    pub loss: T,
}

impl<T: Real> ForwardTrace<T> {
    pub fn logits(&self) -> &Matrix<T> {
        self.activations.last().expect("trace of an empty network")
    }

    /// Input to layer `layer` (0-based): the batch itself for the first layer,
    /// the previous layer's activations otherwise.
    pub fn layer_input<'a>(&'a self, layer: usize, inputs: &'a Matrix<T>) -> &'a Matrix<T> {
        if layer == 0 {
            inputs
        } else {
            &self.activations[layer - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient<T: Real> {
    pub weight: Matrix<T>,
    pub bias: Vector<T>,
}

/// Per-layer weight and bias gradients as seen by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCapture<T: Real> {
    pub layers: Vec<LayerGradient<T>>,
}

impl<T: Real> GradientCapture<T> {
    pub fn zeros_like(params: &NetworkParams<T>) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weight: Matrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: Vector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    /// Euclidean norm of the concatenation of every layer's gradients.
    pub fn composite_norm(&self) -> T {
        self.layers
            .iter()
            .map(|l| l.weight.norm_squared() + l.bias.norm_squared())
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn scale_mut(&mut self, factor: T) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn matches_shape(&self, params: &NetworkParams<T>) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(g, p)| g.weight.shape() == p.weight.shape() && g.bias.len() == p.bias.len())
    }
}

/// Gradients together with the per-layer `dL/dZ_l` they were formed from.
/// Only the simulator knows the latter; tests use it as ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Backprop<T: Real> {
    pub gradients: GradientCapture<T>,
    pub output_grads: Vec<Matrix<T>>,
}

/// Weights and biases uniform in `[-1/sqrt(n), 1/sqrt(n)]` for fan-in `n`.
pub fn init_network<T: Real>(specs: &[LayerSpec], seed: u64) -> Result<NetworkParams<T>> {
    if specs.is_empty() {
        return shape_err("no layers specified");
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].output_dim != pair[1].input_dim {
            return shape_err(format!(
                "layer {i} output_dim {} does not match layer {} input_dim {}",
                pair[0].output_dim,
                i + 1,
                pair[1].input_dim
            ));
        }
    }
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        if spec.input_dim == 0 || spec.output_dim == 0 {
            return shape_err(format!("layer {i} has a zero dimension"));
        }
        let mut rng = rng_for(seed, &[0x1a7e, i as u64]);
        let bound = 1.0 / (spec.input_dim as f64).sqrt();
        let mut draw = || T::lit(rng.random_range(-bound..=bound));
        let weight = Matrix::from_fn(spec.output_dim, spec.input_dim, |_, _| draw());
        let bias = Vector::from_fn(spec.output_dim, |_, _| draw());
        layers.push(Layer { weight, bias, relu: spec.relu });
    }
    NetworkParams::new(layers)
}

fn check_inputs<T: Real>(params: &NetworkParams<T>, x: &Matrix<T>, labels: &[usize]) -> Result<()> {
    if x.nrows() != params.input_dim() {
        return shape_err(format!("input has {} rows, network expects {}", x.nrows(), params.input_dim()));
    }
    if labels.len() != x.ncols() {
        return shape_err(format!("{} labels for {} examples", labels.len(), x.ncols()));
    }
    let classes = params.output_dim();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(SpearError::InvalidArgument(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

fn affine<T: Real>(layer: &Layer<T>, input: &Matrix<T>) -> Matrix<T> {
    let mut z = &layer.weight * input;
    for mut col in z.column_iter_mut() {
        col += &layer.bias;
    }
    z
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
fn cross_entropy<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> (T, Matrix<T>) {
    let b = T::lit(logits.ncols() as f64);
    let mut grad = Matrix::zeros(logits.nrows(), logits.ncols());
    let mut loss = T::zero();
    for (j, col) in logits.column_iter().enumerate() {
        let max = col.max();
        let sum = col.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, e| a + e);
        let lse = max + sum.ln();
        loss += lse - col[labels[j]];
        for i in 0..col.len() {
            grad[(i, j)] = (col[i] - lse).exp() / b;
        }
        grad[(labels[j], j)] -= T::one() / b;
    }
    (loss / b, grad)
}

pub fn forward<T: Real>(params: &NetworkParams<T>, x: &Matrix<T>, labels: &[usize]) -> Result<ForwardTrace<T>> {
    check_inputs(params, x, labels)?;
    let mut pre_activations = Vec::with_capacity(params.depth());
    let mut activations: Vec<Matrix<T>> = Vec::with_capacity(params.depth());
    for layer in &params.layers {
        let input = activations.last().unwrap_or(x);
        let z = affine(layer, input);
        let y = if layer.relu { z.map(|v| if v > T::zero() { v } else { T::zero() }) } else { z.clone() };
        pre_activations.push(z);
        activations.push(y);
    }
    let (loss, _) = cross_entropy(activations.last().unwrap(), labels);
    Ok(ForwardTrace { pre_activations, activations, loss })
}

/// Backpropagation through a trace produced by [`forward`] on the same inputs.
/// Every layer's weight gradient is formed as `dL/dZ * input^T` and its bias
/// gradient as the row sums of `dL/dZ`.
pub fn backprop<T: Real>(
    params: &NetworkParams<T>,
    trace: &ForwardTrace<T>,
    x: &Matrix<T>,
    labels: &[usize],
) -> Result<Backprop<T>> {
    check_inputs(params, x, labels)?;
    if trace.pre_activations.len() != params.depth() || trace.logits().ncols() != x.ncols() {
        return shape_err("trace does not belong to this network and batch");
    }
    let depth = params.depth();
    let (_, mut delta) = cross_entropy(trace.logits(), labels);
    let mut layers = Vec::with_capacity(depth);
    let mut output_grads = Vec::with_capacity(depth);
    for l in (0..depth).rev() {
        let layer = &params.layers[l];
        if layer.relu {
            delta.zip_apply(&trace.pre_activations[l], |d, z| {
                if z <= T::zero() {
                    *d = T::zero();
                }
            });
        }
        let input = trace.layer_input(l, x);
        let weight = &delta * input.transpose();
        let bias = row_sums(&delta);
        let next = if l > 0 { Some(layer.weight.transpose() * &delta) } else { None };
        layers.push(LayerGradient { weight, bias });
        output_grads.push(delta);
        if let Some(next) = next {
            delta = next;
        } else {
            break;
        }
    }
    layers.reverse();
    output_grads.reverse();
    Ok(Backprop { gradients: GradientCapture { layers }, output_grads })
}

pub fn backward<T: Real>(
    params: &NetworkParams<T>,
    trace: &ForwardTrace<T>,
    x: &Matrix<T>,
    labels: &[usize],
) -> Result<GradientCapture<T>> {
    backprop(params, trace, x, labels).map(|bp| bp.gradients)
}

/// Forward and backward pass on a batch in one call.
pub fn batch_gradients<T: Real>(params: &NetworkParams<T>, batch: &Batch<T>) -> Result<(ForwardTrace<T>, Backprop<T>)> {
    let trace = forward(params, &batch.inputs, &batch.labels)?;
    let bp = backprop(params, &trace, &batch.inputs, &batch.labels)?;
    Ok((trace, bp))
}

/// One single-column backward pass per example.
pub fn per_example_gradients<T: Real>(params: &NetworkParams<T>, batch: &Batch<T>) -> Result<Vec<GradientCapture<T>>> {
    (0..batch.size())
        .map(|j| batch_gradients(params, &batch.select(&[j])).map(|(_, bp)| bp.gradients))
        .collect()
}

pub fn row_sums<T: Real>(m: &Matrix<T>) -> Vector<T> {
    Vector::from_fn(m.nrows(), |i, _| m.row(i).iter().fold(T::zero(), |a, &v| a + v))
}

fn loss_of<T: Real>(params: &NetworkParams<T>, x: &Matrix<T>, labels: &[usize]) -> T {
    let mut act = x.clone();
    for layer in &params.layers {
        let z = affine(layer, &act);
        act = if layer.relu { z.map(|v| if v > T::zero() { v } else { T::zero() }) } else { z };
    }
    cross_entropy(&act, labels).0
}

/// Central-difference estimate of every weight and bias gradient.
pub fn finite_diff_grad<T: Real>(
    params: &NetworkParams<T>,
    x: &Matrix<T>,
    labels: &[usize],
    step: T,
) -> Result<GradientCapture<T>> {
    if step <= T::zero() {
        return Err(SpearError::InvalidArgument("finite-difference step must be positive".into()));
    }
    check_inputs(params, x, labels)?;
    let two_h = step + step;
    let mut work = params.clone();
    let mut grads = GradientCapture::zeros_like(params);
    for l in 0..params.depth() {
        let (m, n) = params.layers[l].weight.shape();
        for j in 0..n {
            for i in 0..m {
                let orig = params.layers[l].weight[(i, j)];
                work.layers[l].weight[(i, j)] = orig + step;
                let plus = loss_of(&work, x, labels);
                work.layers[l].weight[(i, j)] = orig - step;
                let minus = loss_of(&work, x, labels);
                work.layers[l].weight[(i, j)] = orig;
                grads.layers[l].weight[(i, j)] = (plus - minus) / two_h;
            }
        }
        for i in 0..m {
            let orig = params.layers[l].bias[i];
            work.layers[l].bias[i] = orig + step;
            let plus = loss_of(&work, x, labels);
            work.layers[l].bias[i] = orig - step;
            let minus = loss_of(&work, x, labels);
            work.layers[l].bias[i] = orig;
            grads.layers[l].bias[i] = (plus - minus) / two_h;
        }
    }
    Ok(grads)
}

/// DP-SGD defence applied by the client before sharing its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct DpConfig {
    /// Per-example clipping norm `C`; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Standard deviation of the Gaussian noise added to every entry.
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self { clip_norm: None, noise_sigma: 0.0, noise_seed: 0 }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(SpearError::InvalidArgument(format!("clip norm must be positive, got {c}")));
            }
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(SpearError::InvalidArgument(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.clip_norm.is_some() || self.noise_sigma > 0.0
    }
}

/// Clipping factors `min(1, C / ||g_i||)` over the composite gradient of each
/// example. All ones when clipping is disabled.
pub fn clip_factors<T: Real>(per_example: &[GradientCapture<T>], clip_norm: Option<f64>) -> Vec<T> {
    per_example
        .iter()
        .map(|g| match clip_norm {
            Some(c) => {
                let norm = g.composite_norm();
                let c = T::lit(c);
                if norm > c {
                    c / norm
                } else {
                    T::one()
                }
            }
            None => T::one(),
        })
        .collect()
}

/// Clips each example's composite gradient, averages, then adds i.i.d.
/// Gaussian noise to every entry. The same factor scales all layers of an
/// example.
pub fn clip_and_noise<T: Real>(per_example: &[GradientCapture<T>], dp: &DpConfig) -> Result<GradientCapture<T>> {
    dp.validate()?;
    let first = per_example
        .first()
        .ok_or_else(|| SpearError::InvalidArgument("clipping requires per-example gradients".into()))?;
    let factors = clip_factors(per_example, dp.clip_norm);
    let mut out = GradientCapture {
        layers: first
            .layers
            .iter()
            .map(|l| LayerGradient {
                weight: Matrix::zeros(l.weight.nrows(), l.weight.ncols()),
                bias: Vector::zeros(l.bias.len()),
            })
            .collect(),
    };
    for (g, &c) in per_example.iter().zip(&factors) {
        if g.layers.len() != out.layers.len() {
            return shape_err("per-example gradients have inconsistent layer counts");
        }
        for (acc, layer) in out.layers.iter_mut().zip(&g.layers) {
            if acc.weight.shape() != layer.weight.shape() || acc.bias.len() != layer.bias.len() {
                return shape_err("per-example gradients have inconsistent shapes");
            }
            acc.weight += &layer.weight * c;
            acc.bias += &layer.bias * c;
        }
    }
    out.scale_mut(T::one() / T::lit(per_example.len() as f64));
    if dp.noise_sigma > 0.0 {
        let mut rng = rng_for(dp.noise_seed, &[0xd9]);
        for layer in &mut out.layers {
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += T::lit(e * dp.noise_sigma);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedAvgConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub mini_batch_size: usize,
    pub shuffle_seed: u64,
}

impl FedAvgConfig {
    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(SpearError::InvalidArgument("FedAvg needs at least one epoch".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(SpearError::InvalidArgument("FedAvg learning rate must be positive".into()));
        }
        if self.mini_batch_size == 0 || self.mini_batch_size > batch_size {
            return Err(SpearError::InvalidArgument(format!(
                "mini-batch size {} outside [1, {batch_size}]",
                self.mini_batch_size
            )));
        }
        Ok(())
    }
}

/// Result of local FedAvg training on the client.
#[derive(Debug, Clone, PartialEq)]
pub struct FedAvgUpdate<T: Real> {
    /// Weights the client shares after its local steps.
    pub params: NetworkParams<T>,
    /// Sum of every local step's gradient, i.e. `(W^0 - W^E) / eta`.
    pub summed_gradients: GradientCapture<T>,
    pub steps: usize,
}

/// Runs `E` local epochs of plain gradient descent from `params0`. With
/// `b_mini < b` every epoch visits a fresh random partition of the batch.
pub fn fedavg_update<T: Real>(params0: &NetworkParams<T>, batch: &Batch<T>, cfg: &FedAvgConfig) -> Result<FedAvgUpdate<T>> {
    cfg.validate(batch.size())?;
    let eta = T::lit(cfg.learning_rate);
    let mut params = params0.clone();
    let mut summed = GradientCapture::zeros_like(params0);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..batch.size()).collect();
        if cfg.mini_batch_size < batch.size() {
            order.shuffle(&mut rng_for(cfg.shuffle_seed, &[0xfeda, epoch as u64]));
        }
        for chunk in order.chunks(cfg.mini_batch_size) {
            let grads = if chunk.len() == batch.size() && cfg.mini_batch_size == batch.size() {
                batch_gradients(&params, batch)?.1.gradients
            } else {
                batch_gradients(&params, &batch.select(chunk))?.1.gradients
            };
            for (p, g) in params.layers.iter_mut().zip(&grads.layers) {
                p.weight -= &g.weight * eta;
                p.bias -= &g.bias * eta;
            }
            summed.add_assign(&grads);
            steps += 1;
        }
    }
    Ok(FedAvgUpdate { params, summed_gradients: summed, steps })
}

/// The summed local gradients the server recovers from a FedAvg update.
pub fn fedavg_delta<T: Real>(params0: &NetworkParams<T>, batch: &Batch<T>, cfg: &FedAvgConfig) -> Result<GradientCapture<T>> {
    fedavg_update(params0, batch, cfg).map(|u| u.summed_gradients)
}

/// `(W^0 - W^E) / eta` computed from two sets of weights, as the server does.
pub fn weight_delta<T: Real>(before: &NetworkParams<T>, after: &NetworkParams<T>, learning_rate: f64) -> Result<GradientCapture<T>> {
    if before.layers.len() != after.layers.len() {
        return shape_err("networks differ in depth");
    }
    let inv = T::one() / T::lit(learning_rate);
    let layers = before
        .layers
        .iter()
        .zip(&after.layers)
        .map(|(a, b)| {
            if a.weight.shape() != b.weight.shape() {
                return shape_err("networks differ in layer shapes");
            }
            Ok(LayerGradient { weight: (&a.weight - &b.weight) * inv, bias: (&a.bias - &b.bias) * inv })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientCapture { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn random_batch(n: usize, b: usize, classes: usize, seed: u64) -> Batch<f64> {
        let mut rng = rng_for(seed, &[99]);
        let x = Matrix::from_fn(n, b, |_, _| StandardNormal.sample(&mut rng));
        let labels = (0..b).map(|_| rng.random_range(0..classes)).collect();
        Batch::new(x, labels).unwrap()
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let net: NetworkParams<f64> = init_network(&[LayerSpec::new(4, 3, true)], 0).unwrap();
        assert_eq!(net.layers[0].weight.shape(), (3, 4));
        assert!(net.layers[0].weight.iter().all(|v| v.abs() <= 0.5));
        assert!(net.layers[0].bias.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn init_is_deterministic() {
        let specs = layer_chain(&[5, 7, 3]);
        let a: NetworkParams<f64> = init_network(&specs, 11).unwrap();
        let b: NetworkParams<f64> = init_network(&specs, 11).unwrap();
        assert_eq!(a, b);
        let c: NetworkParams<f64> = init_network(&specs, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_broken_chain() {
        let err = init_network::<f64>(&[LayerSpec::new(4, 3, true), LayerSpec::new(5, 3, false)], 0).unwrap_err();
        assert!(matches!(err, SpearError::Shape(_)));
    }

    #[test]
    fn layer_chain_marks_last_layer_linear() {
        let specs = layer_chain(&[8, 6, 4, 2]);
        assert_eq!(specs.iter().map(|s| s.relu).collect::<Vec<_>>(), vec![true, true, false]);
    }

    #[test]
    fn forward_identity_layer() {
        let layer = Layer { weight: Matrix::identity(2, 2), bias: Vector::zeros(2), relu: true };
        let tail = Layer { weight: Matrix::identity(2, 2), bias: Vector::zeros(2), relu: false };
        let net = NetworkParams::new(vec![layer, tail]).unwrap();
        let x = dmatrix![1.0, -1.0; 2.0, 3.0];
        let trace = forward(&net, &x, &[0, 1]).unwrap();
        assert_eq!(trace.pre_activations[0], x);
        assert_eq!(trace.activations[0], dmatrix![1.0, 0.0; 2.0, 3.0]);
    }

    #[test]
    fn forward_zero_column_stays_zero() {
        let specs = vec![LayerSpec::new(3, 4, true), LayerSpec::new(4, 2, false)];
        let mut net: NetworkParams<f64> = init_network(&specs, 3).unwrap();
        for l in &mut net.layers {
            l.bias.fill(0.0);
        }
        let x = dmatrix![1.0, 0.0; -2.0, 0.0; 0.5, 0.0];
        let trace = forward(&net, &x, &[0, 1]).unwrap();
        assert!(trace.pre_activations[0].column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let net: NetworkParams<f64> = init_network(&layer_chain(&[3, 2]), 0).unwrap();
        let x = Matrix::zeros(4, 2);
        assert!(matches!(forward(&net, &x, &[0, 1]), Err(SpearError::Shape(_))));
    }

    #[test]
    fn relu_trace_is_elementwise_max() {
        let net: NetworkParams<f64> = init_network(&layer_chain(&[6, 8, 5, 3]), 5).unwrap();
        let batch = random_batch(6, 4, 3, 1);
        let trace = forward(&net, &batch.inputs, &batch.labels).unwrap();
        for l in 0..2 {
            for (z, y) in trace.pre_activations[l].iter().zip(trace.activations[l].iter()) {
                assert_eq!(*y, z.max(0.0));
            }
        }
    }

    #[test]
    fn bias_gradient_is_row_sum_of_output_gradient() {
        let net: NetworkParams<f64> = init_network(&layer_chain(&[6, 8, 5, 3]), 9).unwrap();
        let batch = random_batch(6, 5, 3, 2);
        let (_, bp) = batch_gradients(&net, &batch).unwrap();
        for (g, dz) in bp.gradients.layers.iter().zip(&bp.output_grads) {
            let sums = dz.column_sum();
            assert!((&g.bias - sums).amax() <= 1e-12);
        }
    }

    #[test]
    fn single_linear_unit_matches_hand_derivative() {
        // logits = (w x + c, 0): dL/dw = (sigmoid(w x + c) - [y == 0]) * x.
        let layer = Layer { weight: dmatrix![0.3; 0.0], bias: Vector::from_vec(vec![0.1, 0.0]), relu: false };
        let net = NetworkParams::new(vec![layer]).unwrap();
        let x = dmatrix![2.0];
        let fd = finite_diff_grad(&net, &x, &[0], 1e-6).unwrap();
        let s = 1.0 / (1.0 + (-(0.3 * 2.0 + 0.1f64)).exp());
        let hand = (s - 1.0) * 2.0;
        assert!((fd.layers[0].weight[(0, 0)] - hand).abs() < 1e-8);
        let trace = forward(&net, &x, &[0]).unwrap();
        let an = backward(&net, &trace, &x, &[0]).unwrap();
        assert!((an.layers[0].weight[(0, 0)] - hand).abs() < 1e-12);
    }

    #[test]
    fn finite_difference_error_shrinks_quadratically() {
        // Smooth network (no ReLU) so the Taylor argument applies everywhere.
        let specs = vec![LayerSpec::new(3, 2, false)];
        let net: NetworkParams<f64> = init_network(&specs, 4).unwrap();
        let batch = random_batch(3, 2, 2, 8);
        let trace = forward(&net, &batch.inputs, &batch.labels).unwrap();
        let exact = backward(&net, &trace, &batch.inputs, &batch.labels).unwrap();
        let err = |h: f64| {
            let fd = finite_diff_grad(&net, &batch.inputs, &batch.labels, h).unwrap();
            (&fd.layers[0].weight - &exact.layers[0].weight).amax()
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn finite_difference_rejects_bad_step() {
        let net: NetworkParams<f64> = init_network(&layer_chain(&[2, 2]), 0).unwrap();
        assert!(finite_diff_grad(&net, &Matrix::zeros(2, 1), &[0], 0.0).is_err());
    }

    #[test]
    fn unclipped_noiseless_dp_is_the_mean() {
        let net: NetworkParams<f64> = init_network(&layer_chain(&[5, 6, 3]), 1).unwrap();
        let batch = random_batch(5, 3, 3, 4);
        let per = per_example_gradients(&net, &batch).unwrap();
        let out = clip_and_noise(&per, &DpConfig::default()).unwrap();
        let (_, bp) = batch_gradients(&net, &batch).unwrap();
        for (a, b) in out.layers.iter().zip(&bp.gradients.layers) {
            assert!((&a.weight - &b.weight).amax() < 1e-14);
            assert!((&a.bias - &b.bias).amax() < 1e-14);
        }
    }

    #[test]
    fn clipping_scales_only_large_examples() {
        let net: NetworkParams<f64> = init_network(&layer_chain(&[4, 5, 2]), 6).unwrap();
        let batch = random_batch(4, 2, 2, 6);
        let mut per = per_example_gradients(&net, &batch).unwrap();
        // Make example norms exactly 2C and C/2 for C = 1.
        let n0 = per[0].composite_norm();
        per[0].scale_mut(2.0 / n0);
        let n1 = per[1].composite_norm();
        per[1].scale_mut(0.5 / n1);
        let factors = clip_factors(&per, Some(1.0));
        assert!((factors[0] - 0.5).abs() < 1e-15);
        assert_eq!(factors[1], 1.0);
        let out = clip_and_noise(&per, &DpConfig { clip_norm: Some(1.0), ..Default::default() }).unwrap();
        let expected = (&per[0].layers[0].weight * 0.5 + &per[1].layers[0].weight) * 0.5;
        assert!((&out.layers[0].weight - expected).amax() < 1e-15);
        // Loose clip leaves everything untouched.
        let loose = clip_and_noise(&per, &DpConfig { clip_norm: Some(10.0), ..Default::default() }).unwrap();
        let plain = clip_and_noise(&per, &DpConfig::default()).unwrap();
        assert_eq!(loose, plain);
    }

    #[test]
    fn clipping_without_examples_is_an_error() {
        let per: Vec<GradientCapture<f64>> = vec![];
        assert!(clip_and_noise(&per, &DpConfig { clip_norm: Some(1.0), ..Default::default() }).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let net: NetworkParams<f64> = init_network(&layer_chain(&[4, 5, 2]), 6).unwrap();
        let batch = random_batch(4, 2, 2, 6);
        let per = per_example_gradients(&net, &batch).unwrap();
        let dp = DpConfig { clip_norm: None, noise_sigma: 1e-3, noise_seed: 5 };
        let a = clip_and_noise(&per, &dp).unwrap();
        let b = clip_and_noise(&per, &dp).unwrap();
        assert_eq!(a, b);
        let c = clip_and_noise(&per, &DpConfig { noise_seed: 6, ..dp }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fedavg_single_epoch_is_the_batch_gradient() {
        let net: NetworkParams<f64> = init_network(&layer_chain(&[5, 6, 3]), 2).unwrap();
        let batch = random_batch(5, 4, 3, 2);
        let (_, bp) = batch_gradients(&net, &batch).unwrap();
        for eta in [0.01, 0.001] {
            let cfg = FedAvgConfig { epochs: 1, learning_rate: eta, mini_batch_size: 4, shuffle_seed: 0 };
            let delta = fedavg_delta(&net, &batch, &cfg).unwrap();
            assert_eq!(delta, bp.gradients);
        }
    }

    #[test]
    fn fedavg_two_epochs_replay() {
        let net: NetworkParams<f64> = init_network(&layer_chain(&[5, 6, 3]), 2).unwrap();
        let batch = random_batch(5, 4, 3, 3);
        let eta = 0.05;
        let cfg = FedAvgConfig { epochs: 2, learning_rate: eta, mini_batch_size: 4, shuffle_seed: 0 };
        let update = fedavg_update(&net, &batch, &cfg).unwrap();

        let g1 = batch_gradients(&net, &batch).unwrap().1.gradients;
        let mut step1 = net.clone();
        for (p, g) in step1.layers.iter_mut().zip(&g1.layers) {
            p.weight -= &g.weight * eta;
            p.bias -= &g.bias * eta;
        }
        let g2 = batch_gradients(&step1, &batch).unwrap().1.gradients;
        let mut sum = g1.clone();
        sum.add_assign(&g2);
        assert_eq!(update.summed_gradients, sum);
        assert_eq!(update.steps, 2);

        let server_view = weight_delta(&net, &update.params, eta).unwrap();
        for (a, b) in server_view.layers.iter().zip(&sum.layers) {
            assert!((&a.weight - &b.weight).amax() < 1e-10);
        }
    }

    #[test]
    fn fedavg_mini_batches_touch_every_column() {
        let net: NetworkParams<f64> = init_network(&layer_chain(&[5, 6, 3]), 2).unwrap();
        let batch = random_batch(5, 5, 3, 3);
        let cfg = FedAvgConfig { epochs: 2, learning_rate: 0.01, mini_batch_size: 2, shuffle_seed: 1 };
        let update = fedavg_update(&net, &batch, &cfg).unwrap();
        assert_eq!(update.steps, 6);
        let bad = FedAvgConfig { mini_batch_size: 6, ..cfg };
        assert!(fedavg_delta(&net, &batch, &bad).is_err());
    }
}
