//! Experiment harness for the gradient inversion attack in `spear`: batch
//! and gradient I/O, the trial loop, metrics, reports and theory checks.

pub mod commands;
pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod report;
pub mod theory;

pub use config::{ConfigError, ExperimentConfig};
