use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use spear_harness::config::{parse_override, read_pairs};
use spear_harness::{commands, ConfigError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "spear", version, about = "Exact batch reconstruction from fully connected ReLU layer gradients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate clients and attack the configured layer, one trial per seed.
    Attack {
        /// Attack a gradient dump instead of simulating clients.
        #[arg(long)]
        gradients: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Same as `attack` on an explicit layer.
    AttackLayer {
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        gradients: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare sampling cost and failure rates with their predictions.
    ValidateTheory {
        #[command(flatten)]
        common: Common,
    },
    /// Write client gradients to raw dumps for an offline attack.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Theory tables as CSV, no sampling.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; falls back to the config, then SPEAR_THREADS.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self, extra: &[(String, String)]) -> Result<ExperimentConfig> {
        let mut pairs = match &self.config {
            Some(p) => read_pairs(p)?,
            None => Vec::new(),
        };
        for o in &self.overrides {
            pairs.push(parse_override(o)?);
        }
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        flag("seed", self.seed.map(|s| s.to_string()));
        flag("trials", self.trials.map(|s| s.to_string()));
        flag("out", self.out.as_ref().map(|p| p.display().to_string()));
        flag("threads", self.threads.map(|s| s.to_string()));
        pairs.extend_from_slice(extra);
        Ok(ExperimentConfig::from_pairs(&pairs)?)
    }
}

fn attack(cfg: &ExperimentConfig, gradients: Option<&PathBuf>) -> Result<()> {
    let s = match gradients {
        Some(p) => commands::attack_dump(cfg, p)?,
        None => commands::attack(cfg)?,
    };
    println!(
        "{} of {} trials recovered (accuracy {:.3}, threshold {:e}); reports in {}",
        s.recovered,
        s.trials,
        s.accuracy,
        s.recovery_threshold,
        cfg.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Attack { gradients, common } => attack(&common.load(&[])?, gradients.as_ref()),
        Command::AttackLayer { layer, gradients, common } => {
            attack(&common.load(&[("layer".into(), layer.to_string())])?, gradients.as_ref())
        }
        Command::ValidateTheory { common } => {
            let cfg = common.load(&[])?;
            for r in commands::validate_theory(&cfg)? {
                let emp = r.empirical.map_or("n/a".to_string(), |e| format!("{e:.4e}"));
                println!("{:8} b={:<3} m={:<5} predicted {:.4e} empirical {}", r.experiment, r.b, r.m, r.predicted, emp);
            }
            Ok(())
        }
        Command::Simulate { common } => {
            let cfg = common.load(&[])?;
            let dirs = commands::simulate(&cfg)?;
            println!("wrote {} gradient dumps under {}", dirs.len(), cfg.out.display());
            Ok(())
        }
        Command::Analyze { common } => {
            let cfg = common.load(&[])?;
            let (s, f) = commands::analyze(&cfg)?;
            println!("wrote {} sample rows and {} failure rows under {}", s.len(), f.len(), cfg.out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
