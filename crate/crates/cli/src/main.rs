//! `selest`: data generation, workloads, training, estimation, evaluation,
//! update streams and the one-dimensional control-point demo.
//!
//! Exit codes: 0 success, 1 validation or I/O failure, 2 usage error.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigError, Overrides};

#[derive(Parser)]
#[command(name = "selest", version, about = "Consistent selectivity estimation for distance-threshold queries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Clone, Copy, Debug)]
enum Command {
    /// Generate a Gaussian-mixture dataset (or import text vectors).
    GenData,
    /// Build a labelled query workload over a dataset.
    GenWorkload,
    /// Partition a dataset and write the cluster layout.
    Partition,
    /// Train a model on a workload.
    Train,
    /// Estimate selectivities for `{"x": [...], "t": ...}` lines.
    Estimate,
    /// Report error metrics and empirical monotonicity.
    Evaluate,
    /// Apply an update stream with drift checks and incremental training.
    Update,
    /// Fit y = exp(t)/10 with learned and with fixed control points.
    DemoToy,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::GenWorkload => "gen-workload",
            Command::Partition => "partition",
            Command::Train => "train",
            Command::Estimate => "estimate",
            Command::Evaluate => "evaluate",
            Command::Update => "update",
            Command::DemoToy => "demo-toy",
        }
    }
}

fn init_threads() {
    let Ok(v) = std::env::var("SELEST_THREADS") else {
        return;
    };
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size thread pool: {e}");
            }
        }
        _ => log::warn!("ignoring SELEST_THREADS={v:?}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    init_threads();
    let cfg = match config::load(&cli.overrides) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    let name = cli.command.name();
    if let Err(e) = commands::echo_config(&cfg, name) {
        return report(&e);
    }
    let run = match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::GenWorkload => commands::gen_workload(&cfg),
        Command::Partition => commands::partition(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Estimate => commands::estimate(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Update => commands::update(&cfg),
        Command::DemoToy => commands::demo_toy(&cfg),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &anyhow::Error) -> ExitCode {
    eprintln!("error: {e:#}");
    if e.downcast_ref::<ConfigError>().is_some() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}
