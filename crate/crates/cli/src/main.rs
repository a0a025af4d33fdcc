//! `rpbt`: verification suites, gridworld risk experiments, population
//! self-play training and head-to-head evaluation.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration or usage
//! error, 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod config;
mod play;
mod rpbt;
mod rundir;
mod toy;
mod verify;

use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "rpbt", version, about = "Risk-sensitive PPO and population-based self-play")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the exact operator and estimator checks on random small MDPs.
    Verify(VerifyArgs),
    /// Train one agent per risk level on the windy gridworld.
    TrainToy(TrainToyArgs),
    /// Population-based self-play on the duel game.
    TrainRpbt(TrainRpbtArgs),
    /// Round-robin win-rate matrix over checkpoints.
    Tournament(TournamentArgs),
    /// Head-to-head record of two checkpoints.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML experiment config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Failure> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p).map_err(Failure::config),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Where the per-check report is written.
    #[arg(long, default_value = "verify_report.txt")]
    report: PathBuf,
    /// Replace the expectile operator with an expansive one (self-test of
    /// the contraction check).
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    /// Overwrite an existing run in the output directory.
    #[arg(long)]
    force: bool,
    /// Continue the run in the output directory from its checkpoints.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct TrainToyArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Train with this single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    /// Environment steps per agent.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainRpbtArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Initial risk levels, one agent each.
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct TournamentArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint files, at least two.
    #[arg(required = true, num_args = 2..)]
    checkpoints: Vec<PathBuf>,
    /// Games per pair.
    #[arg(long, default_value_t = 200)]
    games: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the matrices as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    checkpoint_a: PathBuf,
    checkpoint_b: PathBuf,
    #[arg(long, default_value_t = 200)]
    games: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: Option<anyhow::Error>,
}

impl Failure {
    pub fn verification() -> Self {
        Self { code: 1, error: None }
    }

    pub fn config(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: Some(e.into()),
        }
    }

    pub fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 3,
            error: Some(e.into()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Verify(a) => verify::run(a),
        Command::TrainToy(a) => toy::run(a),
        Command::TrainRpbt(a) => rpbt::run(a),
        Command::Tournament(a) => play::tournament(a),
        Command::Eval(a) => play::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if let Some(e) = &f.error {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(f.code)
        }
    }
}
