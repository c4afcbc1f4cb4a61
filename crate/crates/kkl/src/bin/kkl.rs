//! Command-line front end for the observer-learning pipeline. Every
//! subcommand is driven by one TOML config file; see the library's
//! `examples/` directory for the programmatic API.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kkl::commands;
use kkl::config::ExperimentConfig;
use kkl::error::Result;

#[derive(Parser)]
#[command(
    name = "kkl",
    about = "Learn and evaluate KKL observers for autonomous nonlinear systems",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory (defaults to the config's `output_dir`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides every seed in the config (datagen, training, evaluation).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a config file.
    Validate {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
    /// Generate the training dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the transformation pair on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `generate`.
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
    },
    /// Run the observer against a simulated (optionally noisy) plant.
    Observe {
        #[command(flatten)]
        common: Common,
        /// Model directory written by `train`.
        #[arg(long, value_name = "DIR")]
        models: PathBuf,
    },
    /// Sweep the empirical generalization error over test distances.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        models: PathBuf,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
    },
    /// Train all three methods and compare ensembles and sweeps.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Reuse an existing dataset instead of regenerating it.
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.datagen.seed = seed;
        config.training.seed = seed;
        config.evaluation.seed = seed;
        config.observe.noise_seed = seed;
    }
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.output_dir));
    Ok((config, out))
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => commands::cmd_validate(&config),
        Command::Generate { common } => {
            let (config, out) = load(&common)?;
            commands::cmd_generate(&config, &out)?;
            Ok(())
        }
        Command::Train { common, dataset } => {
            let (config, out) = load(&common)?;
            commands::cmd_train(&config, &dataset, &out)?;
            Ok(())
        }
        Command::Observe { common, models } => {
            let (config, out) = load(&common)?;
            commands::cmd_observe(&config, &models, &out)
        }
        Command::Sweep {
            common,
            models,
            dataset,
        } => {
            let (config, out) = load(&common)?;
            commands::cmd_sweep(&config, &models, &dataset, &out)
        }
        Command::Compare { common, dataset } => {
            let (config, out) = load(&common)?;
            commands::cmd_compare(&config, dataset.as_deref(), &out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
