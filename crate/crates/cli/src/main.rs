//! `pibc`: data generation, training, rollout and evaluation driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric
//! failure (non-finite loss, gradient or prediction), 3 missing input.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "pibc", version, about = "Physics-informed behavior cloning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic gait corpus and check its kinematic consistency.
    GenData(GenDataArgs),
    /// Train one model or a PI-weight sweep.
    Train(TrainArgs),
    /// Generate a forward walk autoregressively from a checkpoint.
    Rollout(RolloutArgs),
    /// Roll out every model of a sweep and write figure-ready CSVs.
    Eval(EvalArgs),
    /// Print a checkpoint summary.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory for trajectory CSVs and the resolved config.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Seconds per episode.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Left/right bias injected into every step.
    #[arg(long)]
    pub asymmetry: Option<f64>,
    /// Double the training set with sagittal mirror images.
    #[arg(long)]
    pub mirror: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML experiment config; falls back to the data directory's config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pi_weight: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Comma-separated PI weights, e.g. `w=0,1,10,20,100` or `0,10`.
    #[arg(long)]
    pub sweep: Option<String>,
    /// Seeds per weight in a sweep.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Concurrent training runs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Continue from `snapshot.json` where present.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    /// Checkpoint JSON written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of 50 Hz steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Disable pose feedback on the predicted base velocity.
    #[arg(long)]
    pub no_correction: bool,
    #[arg(long)]
    pub k0: Option<f64>,
    #[arg(long)]
    pub k1: Option<f64>,
    /// Waypoint CSV (time, x, y, z, roll, pitch, yaw).
    #[arg(long)]
    pub waypoints: Option<PathBuf>,
    /// Step length of the reference walk, meters.
    #[arg(long)]
    pub step_length: Option<f64>,
    /// Weight of the waypoint-derived velocity command in the input window.
    #[arg(long)]
    pub command_blend: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Sweep directory written by `train --sweep`.
    #[arg(long)]
    pub sweep: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub no_correction: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint JSON.
    pub checkpoint: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Rollout(a) => commands::rollout(a),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
