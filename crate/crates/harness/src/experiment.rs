//! Trial loop: simulate the client, attack one layer, score the result.

use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use spear::fcnn::{self, DpConfig, GradientCapture};
use spear::rng::{derive_seed, rng_for};
use spear::selector::{run_attack, LayerObservation};
use spear::{Batch64, Gradients64, Matrix64, Network64, Reconstruction64, SpearError};

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{self, LoadedBatch};
use crate::metrics::{self, Metrics};

/// Sub-stream tags under a trial seed.
const NET: u64 = 1;
const BATCH: u64 = 2;
const NOISE: u64 = 3;
const SAMPLER: u64 = 4;
const SHUFFLE: u64 = 5;
const LABELS: u64 = 6;

pub fn trial_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, &[trial as u64])
}

/// What the client shares, plus the ground truth the harness keeps aside.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    /// Weights the server holds when it receives the update.
    pub params: Network64,
    pub gradients: Gradients64,
    /// Input of every layer on the shared weights.
    pub layer_inputs: Vec<Matrix64>,
}

pub fn gaussian_batch(n: usize, b: usize, classes: usize, seed: u64) -> Batch64 {
    let mut rng = rng_for(seed, &[0]);
    let x = Matrix64::from_fn(n, b, |_, _| rng.sample(StandardNormal));
    let labels = random_labels(b, classes, seed);
    Batch64::new(x, labels).expect("labels match batch size")
}

pub fn random_labels(b: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, &[LABELS]);
    (0..b).map(|_| rng.random_range(0..classes)).collect()
}

/// Loads file-backed data once; synthetic batches are drawn per trial.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Option<LoadedBatch>> {
    let loaded = match &cfg.data {
        DataSource::Synthetic => return Ok(None),
        DataSource::Csv(p) => {
            data::load_csv_batch(p, |b| random_labels(b, cfg.classes(), cfg.seed), cfg.data_range)?
        }
        DataSource::Raw(p) => data::load_raw_batch(p)?,
    };
    let (n, b) = loaded.batch.inputs.shape();
    ensure!(n == cfg.dims[0], "data has {n} features but dims start at {}", cfg.dims[0]);
    ensure!(b == cfg.batch_size, "data holds {b} examples but batch_size = {}", cfg.batch_size);
    ensure!(
        loaded.batch.labels.iter().all(|&y| y < cfg.classes()),
        "labels must lie below the {} output classes",
        cfg.classes()
    );
    Ok(Some(loaded))
}

pub fn trial_inputs(cfg: &ExperimentConfig, loaded: Option<&LoadedBatch>, seed: u64) -> Result<(Network64, LoadedBatch)> {
    let net = fcnn::init_network::<f64>(&fcnn::layer_chain(&cfg.dims), derive_seed(seed, &[NET]))?;
    let batch = match loaded {
        Some(l) => l.clone(),
        None => LoadedBatch {
            batch: gaussian_batch(cfg.dims[0], cfg.batch_size, cfg.classes(), derive_seed(seed, &[BATCH])),
            range: cfg.data_range,
        },
    };
    Ok((net, batch))
}

fn rms(g: &Gradients64) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for l in &g.layers {
        sum += l.weight.iter().chain(l.bias.iter()).map(|v| v * v).sum::<f64>();
        count += l.weight.len() + l.bias.len();
    }
    (sum / count.max(1) as f64).sqrt()
}

/// Runs the client side: a plain gradient, a DP-SGD gradient, or a FedAvg
/// update turned back into summed gradients.
pub fn client_update(cfg: &ExperimentConfig, net: &Network64, batch: &Batch64, seed: u64) -> Result<ClientUpdate> {
    let trace = fcnn::forward(net, &batch.inputs, &batch.labels)?;
    let layer_inputs = (0..net.depth()).map(|l| trace.layer_input(l, &batch.inputs).clone()).collect();
    let gradients = if let Some(mut fa) = cfg.fedavg() {
        fa.shuffle_seed = derive_seed(seed, &[SHUFFLE]);
        let update = fcnn::fedavg_update(net, batch, &fa)?;
        fcnn::weight_delta(net, &update.params, fa.learning_rate)?
    } else if cfg.dp().is_active() {
        let per_example = fcnn::per_example_gradients(net, batch)?;
        let mut dp = DpConfig { noise_seed: derive_seed(seed, &[NOISE]), ..cfg.dp() };
        if cfg.noise_relative && dp.noise_sigma > 0.0 {
            let clean = fcnn::clip_and_noise(&per_example, &DpConfig { noise_sigma: 0.0, ..dp.clone() })?;
            dp.noise_sigma *= rms(&clean);
        }
        fcnn::clip_and_noise(&per_example, &dp)?
    } else {
        fcnn::backprop(net, &trace, &batch.inputs, &batch.labels)?.gradients
    };
    Ok(ClientUpdate { params: net.clone(), gradients, layer_inputs })
}

/// Attacks layer `layer` (1-based). The layer's output must feed a ReLU.
pub fn attack_layer(
    cfg: &ExperimentConfig,
    params: &Network64,
    gradients: &GradientCapture<f64>,
    layer: usize,
    sampler_seed: u64,
) -> Result<Reconstruction64> {
    let depth = params.depth();
    ensure!(layer >= 1 && layer <= depth, "layer {layer} outside 1..={depth}");
    let p = &params.layers[layer - 1];
    if !p.relu {
        return Err(SpearError::Unsupported(format!("layer {layer} of {depth} has no succeeding ReLU")).into());
    }
    let g = &gradients.layers[layer - 1];
    let obs = LayerObservation { weight_grad: &g.weight, bias_grad: &g.bias, weight: &p.weight, bias: &p.bias };
    let mut attack = cfg.attack.clone();
    attack.sampler.seed = sampler_seed;
    Ok(run_attack(&obs, &attack)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Rank the attack inferred from the gradient.
    pub inferred_batch_size: usize,
    pub recovered: bool,
    pub converged: bool,
    pub metrics: Option<Metrics>,
    pub lambda: Option<f64>,
    pub mismatches: Option<usize>,
    pub ill_conditioned: bool,
    pub samples_used: usize,
    pub pool_size: usize,
    pub wall_seconds: f64,
}

/// Scores a reconstruction against the true layer input.
pub fn score(
    trial: usize,
    seed: u64,
    result: &Reconstruction64,
    truth: Option<&Matrix64>,
    range: (f64, f64),
    recovery_tol: f64,
) -> TrialOutcome {
    let metrics = match (result.inputs(), truth) {
        (Some(x), Some(t)) => Some(metrics::evaluate(x, t, range)),
        _ => None,
    };
    let b = truth.map_or(result.batch_size(), |t| t.ncols());
    let recovered = result.batch_size() == b && metrics.is_some_and(|m| m.max_abs_error < recovery_tol);
    TrialOutcome {
        trial,
        seed,
        batch_size: b,
        inferred_batch_size: result.batch_size(),
        recovered,
        converged: result.converged,
        metrics,
        lambda: result.score().map(|s| s.lambda()),
        mismatches: result.score().map(|s| s.mismatches()),
        ill_conditioned: result.best.as_ref().is_some_and(|e| e.ill_conditioned),
        samples_used: result.samples_used,
        pool_size: result.pool_size,
        wall_seconds: 0.0,
    }
}

pub fn run_trial(cfg: &ExperimentConfig, loaded: Option<&LoadedBatch>, trial: usize) -> Result<TrialOutcome> {
    let start = Instant::now();
    let seed = trial_seed(cfg.seed, trial);
    let (net, batch) = trial_inputs(cfg, loaded, seed)?;
    let update = client_update(cfg, &net, &batch.batch, seed)?;
    let result = attack_layer(cfg, &update.params, &update.gradients, cfg.layer, derive_seed(seed, &[SAMPLER]))?;
    let truth = &update.layer_inputs[cfg.layer - 1];
    let mut out = score(trial, seed, &result, Some(truth), batch.range, cfg.recovery_tol);
    out.wall_seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Worker count: explicit setting, else `SPEAR_THREADS`, else rayon's default.
pub fn resolve_threads(configured: Option<usize>) -> Result<Option<usize>> {
    if configured.is_some() {
        return Ok(configured);
    }
    match std::env::var("SPEAR_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("SPEAR_THREADS = {v:?}"))?;
            ensure!(n > 0, "SPEAR_THREADS must be positive");
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

/// Runs `f` inside a pool of the resolved size.
pub fn with_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = resolve_threads(threads)? {
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?.install(f))
}

/// All trials, in trial order regardless of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<TrialOutcome>> {
    cfg.validate()?;
    if cfg.layer == cfg.depth() {
        bail!(SpearError::Unsupported(format!("layer {} is the output layer and has no succeeding ReLU", cfg.layer)));
    }
    let loaded = load_data(cfg)?;
    with_pool(cfg.threads, || {
        (0..cfg.trials).into_par_iter().map(|t| run_trial(cfg, loaded.as_ref(), t)).collect::<Result<Vec<_>>>()
    })?
}
