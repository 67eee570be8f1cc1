//! Flat `key = value` experiment configuration.
//!
//! A config file holds one pair per line; `#` starts a comment. Command line
//! `--set key=value` pairs are applied after the file, in order. Every key has
//! a default, so an empty config runs the desk-scale default experiment.

use std::fmt;
use std::path::{Path, PathBuf};

use spear::fcnn::{DpConfig, FedAvgConfig};
use spear::sampler::SamplerConfig;
use spear::selector::AttackConfig;

/// A malformed or inconsistent configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Standard normal inputs drawn per trial.
    Synthetic,
    /// `n` rows by `b` columns of comma separated floats, no header.
    Csv(PathBuf),
    /// Little-endian `f64`, column major, described by `<path>.json`.
    Raw(PathBuf),
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic => write!(f, "synthetic"),
            DataSource::Csv(p) => write!(f, "csv:{}", p.display()),
            DataSource::Raw(p) => write!(f, "raw:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Layer widths from input to logits, e.g. `64,128,128,128,10`.
    pub dims: Vec<usize>,
    pub batch_size: usize,
    pub data: DataSource,
    /// Declared data range used for PSNR.
    pub data_range: (f64, f64),
    /// Attacked layer, 1-based.
    pub layer: usize,
    pub attack: AttackConfig,
    pub clip_norm: Option<f64>,
    pub noise_sigma: f64,
    /// Interpret `noise_sigma` relative to the RMS of the clean shared gradient.
    pub noise_relative: bool,
    /// FedAvg local epochs; 0 shares a plain gradient.
    pub epochs: usize,
    pub learning_rate: f64,
    /// Defaults to the batch size.
    pub mini_batch_size: Option<usize>,
    /// A trial counts as recovered below this max abs error.
    pub recovery_tol: f64,
    pub seed: u64,
    pub trials: usize,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub theory: TheoryConfig,
}

/// Grids for `validate-theory` and `analyze`.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryConfig {
    pub sample_b: Vec<usize>,
    pub sample_m: Vec<usize>,
    pub sample_input_dim: usize,
    pub sample_trials: usize,
    pub sample_budget: usize,
    pub failure_b: Vec<usize>,
    pub failure_m: Vec<usize>,
    pub failure_trials: usize,
    pub failure_p_fr: f64,
    pub analyze_b: Vec<usize>,
    pub analyze_m: Vec<usize>,
    pub analyze_p: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            sample_b: vec![3, 4, 5, 6],
            sample_m: vec![1000],
            sample_input_dim: 64,
            sample_trials: 50,
            sample_budget: 1_000_000,
            failure_b: vec![2],
            failure_m: vec![10, 20, 30, 40],
            failure_trials: 500,
            failure_p_fr: 1e-5,
            analyze_b: vec![2, 4, 8, 10, 16, 20, 32],
            analyze_m: vec![50, 100, 200, 400, 1000, 2000],
            analyze_p: 1e-8,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dims: vec![64, 128, 128, 128, 10],
            batch_size: 4,
            data: DataSource::Synthetic,
            data_range: (0.0, 1.0),
            layer: 1,
            attack: AttackConfig::default(),
            clip_norm: None,
            noise_sigma: 0.0,
            noise_relative: false,
            epochs: 0,
            learning_rate: 0.01,
            mini_batch_size: None,
            recovery_tol: 1e-6,
            seed: 0,
            trials: 20,
            out: PathBuf::from("spear-out"),
            threads: None,
            theory: TheoryConfig::default(),
        }
    }
}

/// Reads `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return err(format!("line {}: expected key = value, got {raw:?}", no + 1));
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn parse_override(arg: &str) -> Result<(String, String)> {
    match arg.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => err(format!("override {arg:?} is not key=value")),
    }
}

pub fn read_pairs(path: &Path) -> std::result::Result<Vec<(String, String)>, anyhow::Error> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    Ok(parse_pairs(&text)?)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().or_else(|_| err(format!("{key}: cannot parse {v:?}")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => err(format!("{key}: expected true or false, got {v:?}")),
    }
}

fn optional(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "none" || v.is_empty() {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

impl ExperimentConfig {
    /// Builds a config from pairs applied in order over the defaults. A
    /// `robust = true` pair anywhere switches the attack defaults to the
    /// noise-robust preset before the other attack keys are applied.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let robust = pairs.iter().rev().find(|(k, _)| k == "robust").map(|(k, v)| flag(k, v)).transpose()?;
        if robust == Some(true) {
            cfg.attack = AttackConfig::robust();
        }
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.attack.sampler;
        let t = &mut self.theory;
        match key {
            "dims" => self.dims = list(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "data" => {
                self.data = match v.split_once(':') {
                    _ if v == "synthetic" => DataSource::Synthetic,
                    Some(("csv", p)) => DataSource::Csv(PathBuf::from(p)),
                    Some(("raw", p)) => DataSource::Raw(PathBuf::from(p)),
                    _ => return err(format!("data: expected synthetic, csv:PATH or raw:PATH, got {v:?}")),
                }
            }
            "data_range" => {
                let parts: Vec<f64> = v.split(',').map(|x| num(key, x.trim())).collect::<Result<_>>()?;
                match parts[..] {
                    [lo, hi] if lo < hi => self.data_range = (lo, hi),
                    _ => return err("data_range: expected lo,hi with lo < hi"),
                }
            }
            "layer" => self.layer = num(key, v)?,
            "max_samples" => s.max_samples = num(key, v)?,
            "chunk_size" => s.chunk_size = num(key, v)?,
            "tau" => s.tau = optional(key, v)?,
            "false_reject" => s.false_reject = num(key, v)?,
            "zero_rel_tol" => s.zero_rel_tol = num(key, v)?,
            "rank_rel_tol" => s.rank_rel_tol = num(key, v)?,
            "noise_rank_tol" => s.noise_rank_tol = num(key, v)?,
            "angle_tol" => s.angle_tol = num(key, v)?,
            "robust" => s.robust = flag(key, v)?,
            "accept_lambda" => self.attack.accept_lambda = num(key, v)?,
            "clip_norm" => self.clip_norm = optional(key, v)?,
            "noise_sigma" => self.noise_sigma = num(key, v)?,
            "noise_relative" => self.noise_relative = flag(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "mini_batch_size" => self.mini_batch_size = optional(key, v)?.map(|x| x as usize),
            "recovery_tol" => self.recovery_tol = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "trials" => self.trials = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "threads" => self.threads = optional(key, v)?.map(|x| x as usize),
            "sample_b" => t.sample_b = list(key, v)?,
            "sample_m" => t.sample_m = list(key, v)?,
            "sample_input_dim" => t.sample_input_dim = num(key, v)?,
            "sample_trials" => t.sample_trials = num(key, v)?,
            "sample_budget" => t.sample_budget = num(key, v)?,
            "failure_b" => t.failure_b = list(key, v)?,
            "failure_m" => t.failure_m = list(key, v)?,
            "failure_trials" => t.failure_trials = num(key, v)?,
            "failure_p_fr" => t.failure_p_fr = num(key, v)?,
            "analyze_b" => t.analyze_b = list(key, v)?,
            "analyze_m" => t.analyze_m = list(key, v)?,
            "analyze_p" => t.analyze_p = num(key, v)?,
            _ => return err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return err("dims needs at least two positive widths");
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive");
        }
        if self.layer == 0 || self.layer > self.depth() {
            return err(format!("layer {} outside 1..={}", self.layer, self.depth()));
        }
        if self.trials == 0 {
            return err("trials must be positive");
        }
        if !(self.recovery_tol > 0.0) {
            return err("recovery_tol must be positive");
        }
        if self.threads == Some(0) {
            return err("threads must be positive");
        }
        if self.mini_batch_size.is_some_and(|mb| mb == 0 || mb > self.batch_size) {
            return err("mini_batch_size outside 1..=batch_size");
        }
        if self.epochs > 0 && self.dp().is_active() {
            return err("FedAvg and DP-SGD cannot be combined");
        }
        self.attack.sampler.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.dp().validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn classes(&self) -> usize {
        *self.dims.last().expect("validated dims")
    }

    /// DP settings with `noise_sigma` as given (possibly relative).
    pub fn dp(&self) -> DpConfig {
        DpConfig { clip_norm: self.clip_norm, noise_sigma: self.noise_sigma, noise_seed: 0 }
    }

    pub fn fedavg(&self) -> Option<FedAvgConfig> {
        (self.epochs > 0).then(|| FedAvgConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            mini_batch_size: self.mini_batch_size.unwrap_or(self.batch_size),
            shuffle_seed: 0,
        })
    }

    pub fn sampler(&self) -> &SamplerConfig {
        &self.attack.sampler
    }

    /// The effective configuration as sorted pairs, echoed into reports.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let s = &self.attack.sampler;
        let t = &self.theory;
        let mut pairs = vec![
            ("dims", join(&self.dims)),
            ("batch_size", self.batch_size.to_string()),
            ("data", self.data.to_string()),
            ("data_range", format!("{},{}", self.data_range.0, self.data_range.1)),
            ("layer", self.layer.to_string()),
            ("max_samples", s.max_samples.to_string()),
            ("chunk_size", s.chunk_size.to_string()),
            ("tau", opt(s.tau)),
            ("false_reject", s.false_reject.to_string()),
            ("zero_rel_tol", s.zero_rel_tol.to_string()),
            ("rank_rel_tol", s.rank_rel_tol.to_string()),
            ("noise_rank_tol", s.noise_rank_tol.to_string()),
            ("angle_tol", s.angle_tol.to_string()),
            ("robust", s.robust.to_string()),
            ("accept_lambda", self.attack.accept_lambda.to_string()),
            ("clip_norm", opt(self.clip_norm)),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("noise_relative", self.noise_relative.to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("mini_batch_size", opt(self.mini_batch_size.map(|x| x as f64))),
            ("recovery_tol", self.recovery_tol.to_string()),
            ("seed", self.seed.to_string()),
            ("trials", self.trials.to_string()),
            ("sample_b", join(&t.sample_b)),
            ("sample_m", join(&t.sample_m)),
            ("sample_input_dim", t.sample_input_dim.to_string()),
            ("sample_trials", t.sample_trials.to_string()),
            ("sample_budget", t.sample_budget.to_string()),
            ("failure_b", join(&t.failure_b)),
            ("failure_m", join(&t.failure_m)),
            ("failure_trials", t.failure_trials.to_string()),
            ("failure_p_fr", t.failure_p_fr.to_string()),
            ("analyze_b", join(&t.analyze_b)),
            ("analyze_m", join(&t.analyze_m)),
            ("analyze_p", t.analyze_p.to_string()),
        ];
        pairs.sort();
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(text: &str) -> Vec<(String, String)> {
        parse_pairs(text).unwrap()
    }

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(ExperimentConfig::from_pairs(&[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = ExperimentConfig::from_pairs(&pairs("# desk\ndims = 8, 16, 4\nbatch_size=3 # inline\ntrials = 2\ntrials = 5")).unwrap();
        assert_eq!(cfg.dims, vec![8, 16, 4]);
        assert_eq!(cfg.batch_size, 3);
        assert_eq!(cfg.trials, 5);
    }

    #[test]
    fn robust_preset_applies_before_explicit_keys() {
        let cfg = ExperimentConfig::from_pairs(&pairs("zero_rel_tol = 0.2\nrobust = true")).unwrap();
        assert!(cfg.attack.sampler.robust);
        assert_eq!(cfg.attack.sampler.zero_rel_tol, 0.2);
        assert_eq!(cfg.attack.accept_lambda, AttackConfig::robust().accept_lambda);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_pairs("dims 1,2").is_err());
        assert!(ExperimentConfig::from_pairs(&pairs("colour = red")).is_err());
        assert!(ExperimentConfig::from_pairs(&pairs("layer = 9")).is_err());
        assert!(ExperimentConfig::from_pairs(&pairs("data = ftp:x")).is_err());
        assert!(ExperimentConfig::from_pairs(&pairs("robust = maybe")).is_err());
        assert!(parse_override("seed").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = ExperimentConfig::from_pairs(&pairs("dims = 8,16,4\nclip_norm = 2\ndata = csv:x.csv\nrobust = true")).unwrap();
        let mut again = ExperimentConfig::from_pairs(&cfg.to_pairs()).unwrap();
        again.out = cfg.out.clone();
        again.threads = cfg.threads;
        assert_eq!(again, cfg);
    }
}
