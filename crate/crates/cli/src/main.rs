//! `volimpute` command-line interface.
//!
//! Exit status: 0 success, 1 arbitrage found or gradient check failed,
//! 2 usage/config/data/IO error.

mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use volimpute::imputer::{ImputationConfig, RefitMode};
use volimpute::surfaces::MaskSpec;

use crate::commands::synth::SynthKind;
use crate::error::{CliResult, EXIT_CHECK_FAILED, EXIT_ERROR};

#[derive(Parser)]
#[command(name = "volimpute", version, about = "VAE training, distributional imputation and arbitrage checks for vol surfaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set training.steps=2000`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.json, loss_log.csv and config.toml.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Impute missing cells of a surface CSV or a numeric matrix CSV.
    Impute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Hide this fraction of cells of each complete surface first.
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long, default_value_t = 0)]
        mask_seed: u64,
        #[arg(long, default_value_t = 10_000)]
        n_samples: usize,
        #[arg(long, value_parser = ["none", "encoder"], default_value = "none")]
        refit: String,
        #[arg(long, default_value_t = 10_000)]
        refit_steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep the importance weights in the JSON dump.
        #[arg(long)]
        keep_weights: bool,
    },
    /// Evaluate checkpoints: MAE per rate, neg-IWAE, calibration, collapse.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a price grid (`tenor,strike,price`) or surface CSV for static arbitrage.
    ArbCheck {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        forward: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train every combination of a config grid and rank by validation neg-IWAE.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// TOML file with an `[axes]` table of `"path" = [values]`.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Missingness rate for the validation MAE.
        #[arg(long, default_value_t = 0.1)]
        rate: f64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of every loss on small random models.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
}

fn run(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::Train { cfg, out, resume } => {
            let mut rc = config::resolve(cfg.config.as_deref(), &cfg.set)?;
            if let Some(o) = out {
                rc.output_dir = o;
            }
            let res = commands::train::run(&rc, resume)?;
            if let Some(r) = res.final_row {
                println!("step {}  loss {:.5}  recon {:.5}  kl {:.5}", r.step, r.total, r.recon, r.kl);
            }
            println!("checkpoint: {}", res.checkpoint.display());
            Ok(0)
        }
        Command::Impute { checkpoint, input, output, rate, mask_seed, n_samples, refit, refit_steps, seed, keep_weights } => {
            let config = ImputationConfig {
                n_samples,
                refit: if refit == "encoder" { RefitMode::Encoder } else { RefitMode::None },
                refit_steps,
                seed,
                ..ImputationConfig::default()
            };
            let args = commands::impute::ImputeArgs {
                checkpoint: &checkpoint,
                input: &input,
                output: &output,
                mask: rate.map(|rate| MaskSpec { rate, seed: mask_seed }),
                config,
                keep_weights,
            };
            commands::impute::run(&args)?;
            Ok(0)
        }
        Command::Eval { checkpoints, cfg, out } => {
            commands::eval::run(&checkpoints, cfg.config.as_deref(), &cfg.set, &out)?;
            Ok(0)
        }
        Command::Synth { kind, n, seed, out } => {
            commands::synth::run(kind, n, seed, &out)?;
            Ok(0)
        }
        Command::ArbCheck { input, forward, report } => {
            let free = commands::arb::run(&input, forward, report.as_deref())?;
            Ok(if free { 0 } else { EXIT_CHECK_FAILED })
        }
        Command::Sweep { cfg, grid, out, rate, jobs } => {
            commands::sweep::run(cfg.config.as_deref(), &grid, &cfg.set, &out, rate, jobs)?;
            Ok(0)
        }
        Command::Gradcheck { seed, h, tol } => Ok(if commands::gradcheck::run(seed, h, tol)? { 0 } else { EXIT_CHECK_FAILED }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
