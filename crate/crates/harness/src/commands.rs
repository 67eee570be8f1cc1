//! One function per CLI subcommand. Each writes its files under `cfg.out`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Result};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::data::{self, GradientDump};
use crate::experiment::{self, trial_seed};
use crate::report::{self, Summary};
use crate::theory;

/// Sampler stream for attacks on dumped gradients.
const DUMP_SAMPLER: u64 = 4;

pub fn attack(cfg: &ExperimentConfig) -> Result<Summary> {
    let start = Instant::now();
    let trials = experiment::run_experiment(cfg)?;
    let summary = report::summarize(&cfg.to_pairs(), &trials, cfg.recovery_tol);
    report::write_attack_report(&cfg.out, &summary, &trials, start.elapsed().as_secs_f64())?;
    Ok(summary)
}

/// Attacks a gradient dump written by [`simulate`] or by an external client.
pub fn attack_dump(cfg: &ExperimentConfig, path: &Path) -> Result<Summary> {
    let start = Instant::now();
    let dump = data::read_gradient_dump(path)?;
    ensure!(
        cfg.layer <= dump.params.depth(),
        "layer {} outside the dumped network of depth {}",
        cfg.layer,
        dump.params.depth()
    );
    let seed = trial_seed(cfg.seed, 0);
    let sampler_seed = spear::rng::derive_seed(seed, &[DUMP_SAMPLER]);
    let result = experiment::with_pool(cfg.threads, || {
        experiment::attack_layer(cfg, &dump.params, &dump.gradients, cfg.layer, sampler_seed)
    })??;
    let truth = dump.layer_inputs[cfg.layer - 1].as_ref();
    let mut outcome = experiment::score(0, seed, &result, truth, dump.range, cfg.recovery_tol);
    outcome.wall_seconds = start.elapsed().as_secs_f64();
    if truth.is_none() {
        outcome.batch_size = dump.b;
        outcome.recovered = false;
    }
    let trials = vec![outcome];
    let summary = report::summarize(&cfg.to_pairs(), &trials, cfg.recovery_tol);
    report::write_attack_report(&cfg.out, &summary, &trials, start.elapsed().as_secs_f64())?;
    Ok(summary)
}

pub fn trial_dir(out: &Path, trial: usize) -> PathBuf {
    out.join(format!("trial_{trial:03}"))
}

/// Writes one gradient dump per trial, with every layer's input as truth.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let loaded = experiment::load_data(cfg)?;
    experiment::with_pool(cfg.threads, || {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| {
                let seed = trial_seed(cfg.seed, t);
                let (net, batch) = experiment::trial_inputs(cfg, loaded.as_ref(), seed)?;
                let update = experiment::client_update(cfg, &net, &batch.batch, seed)?;
                let dir = trial_dir(&cfg.out, t);
                let dump = GradientDump {
                    params: update.params,
                    gradients: update.gradients,
                    layer_inputs: update.layer_inputs.into_iter().map(Some).collect(),
                    b: cfg.batch_size,
                    range: batch.range,
                };
                data::write_gradient_dump(&dir, &dump)?;
                Ok(dir)
            })
            .collect()
    })?
}

pub fn validate_theory(cfg: &ExperimentConfig) -> Result<Vec<theory::TheoryRow>> {
    theory::validate_theory(cfg, &cfg.out)
}

pub fn analyze(cfg: &ExperimentConfig) -> Result<(Vec<theory::SampleTableRow>, Vec<theory::FailureTableRow>)> {
    theory::analyze(cfg, &cfg.out)
}
