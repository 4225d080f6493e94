//! `delaylab`: run delayed-gradient optimization experiments from a config
//! file and write CSV traces plus JSON summaries.
//!
//! Exit codes: 0 success (a diverged run is still a success), 2 config
//! error, 3 I/O error.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Command, ExperimentConfig, Overrides};
use error::CliError;

#[derive(Parser)]
#[command(name = "delaylab", version, about = "Delayed-gradient optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Single run; writes trace.csv and summary.json.
    Run(Common),
    /// (eta, momentum) grid of steps-to-target; writes sweep.csv.
    Sweep(Common),
    /// Per-component relative energy decay against SGDM; writes energy.csv.
    Energy(Common),
    /// MLP training on a synthetic dataset; writes trace.csv.
    Train(Common),
    /// Several algorithms on one problem and seed; writes ablate.csv.
    Ablate(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML config (or JSON, or a CSV written by this tool).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sweep worker threads (default: all cores).
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    delay: Option<u64>,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    grouping: Option<String>,
    #[arg(long)]
    micro_steps: Option<u32>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    target_loss: Option<f64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            parallelism: self.parallelism,
            eta: self.eta,
            momentum: self.momentum,
            rho: self.rho,
            delay: self.delay,
            algorithm: self.algorithm.clone(),
            grouping: self.grouping.clone(),
            micro_steps: self.micro_steps,
            max_steps: self.max_steps,
            target_loss: self.target_loss,
        }
    }
}

fn run(cmd: Command, args: &Common) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&args.overrides())?;
    let resolved = cfg.resolve(cmd)?;
    commands::execute(&resolved)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match &cli.command {
        Cmd::Run(a) => (Command::Run, a),
        Cmd::Sweep(a) => (Command::Sweep, a),
        Cmd::Energy(a) => (Command::Energy, a),
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Ablate(a) => (Command::Ablate, a),
    };
    match run(cmd, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("delaylab {}: {e}", cmd.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
