//! `lood` — command-line harness for leave-one-out distinguishability
//! analyses of Gaussian-process models.
//!
//! Every subcommand reads a TOML experiment config (overridable with repeated
//! `--set key=value` flags), writes its artifacts plus a run manifest into the
//! configured output directory, and prints a one-line summary. Exit codes:
//! 0 success, 2 configuration error, 3 numerical failure, 4 I/O failure.

mod commands;
mod config;
mod dataset;
mod error;
mod jsonout;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::RawConfig;
use crate::jsonout::J;

#[derive(Parser)]
#[command(
    name = "lood",
    version,
    about = "Leave-one-out distinguishability analyses for Gaussian-process models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Parser)]
struct RunArgs {
    /// Path to the TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set kernel.length=2.0 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set output_dir=...
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Shorthand for --set seed=...
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// LOOD report (KL, mean distance, variance ratio) at the configured queries.
    Score(RunArgs),
    /// Gradient-ascent query optimization.
    OptimizeQuery(RunArgs),
    /// LOOD metrics along a ray through the differing point.
    ScanPerturbation(RunArgs),
    /// Check that the differing point is a stationary query of the KL objective.
    VerifyStationarity(RunArgs),
    /// Search for the differing record with the largest mean-distance gradient.
    FindNonstationaryS(RunArgs),
    /// Finite-difference Hessian of the mean-distance LOOD at the differing point.
    HessianCheck(RunArgs),
    /// Monte Carlo membership-inference AUC at the configured query.
    MiaAuc(RunArgs),
    /// Per-candidate KL and MIA AUC with rank correlation.
    Correlate(RunArgs),
    /// Low-rank leakage bound versus the observed grid maximum.
    LowrankBound(RunArgs),
    /// NNGP kernel-distance depth scan for an activation function.
    ActivationScan(RunArgs),
    /// Repeated query optimizations assigned to nearest group members.
    GroupReconstruct(RunArgs),
    /// Generate the toy sine dataset CSV.
    GenToy(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Score(_) => "score",
            Command::OptimizeQuery(_) => "optimize-query",
            Command::ScanPerturbation(_) => "scan-perturbation",
            Command::VerifyStationarity(_) => "verify-stationarity",
            Command::FindNonstationaryS(_) => "find-nonstationary-s",
            Command::HessianCheck(_) => "hessian-check",
            Command::MiaAuc(_) => "mia-auc",
            Command::Correlate(_) => "correlate",
            Command::LowrankBound(_) => "lowrank-bound",
            Command::ActivationScan(_) => "activation-scan",
            Command::GroupReconstruct(_) => "group-reconstruct",
            Command::GenToy(_) => "gen-toy",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Score(a)
            | Command::OptimizeQuery(a)
            | Command::ScanPerturbation(a)
            | Command::VerifyStationarity(a)
            | Command::FindNonstationaryS(a)
            | Command::HessianCheck(a)
            | Command::MiaAuc(a)
            | Command::Correlate(a)
            | Command::LowrankBound(a)
            | Command::ActivationScan(a)
            | Command::GroupReconstruct(a)
            | Command::GenToy(a) => a,
        }
    }
}

fn run(command: &Command) -> error::Result<String> {
    let args = command.args();
    let mut overrides = args.set.clone();
    if let Some(dir) = &args.output_dir {
        overrides.push(format!("output_dir=\"{}\"", dir.display()));
    }
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    let raw = RawConfig::load(&args.config, &overrides)?;
    commands::run(command.name(), raw)
}

fn main() {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
        }
        Err(err) => {
            let json = J::O(vec![
                (
                    "error",
                    J::O(vec![
                        ("kind", J::S(err.kind().to_string())),
                        ("message", J::S(err.to_string())),
                    ]),
                ),
            ]);
            eprintln!("{}", json.to_string());
            std::process::exit(err.exit_code());
        }
    }
}
