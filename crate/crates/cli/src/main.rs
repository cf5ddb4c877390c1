//! `resnas`: dataset generation, training, super-network training,
//! evolutionary search, cost reporting and evaluation.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime
//! failure such as diverged training.

mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "resnas", version = env!("RESNAS_BUILD_ID"), about = "ViT-Res training, weight-sharing search and cost reports")]
struct Cli {
    /// Worker threads for augmentation, evaluation and search.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic dataset (Gaussian blobs) with its manifest.
    GenData(GenDataArgs),
    /// Train a standalone network.
    Train(TrainArgs),
    /// Train a weight-sharing super-network with multi-architecture sampling.
    TrainSupernet(TrainArgs),
    /// Evolutionary search under a MAC limit.
    Search(SearchArgs),
    /// Print MACs and parameter count of an architecture.
    Cost(CostArgs),
    /// Top-1 accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub classes: usize,
    /// Samples per class.
    #[arg(long)]
    pub count: usize,
    /// Image side in pixels; a multiple of 14.
    #[arg(long)]
    pub size: usize,
    /// Defaults to RESNAS_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Dotted-path override, e.g. `train.base_lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Continue from the run directory's checkpoint when present.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many total steps (a checkpoint is written).
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    /// Trained super-network; genes are scored on its sub-validation split.
    #[arg(long, conflicts_with = "synthetic_fitness")]
    pub supernet_checkpoint: Option<PathBuf>,
    /// Dataset the super-network was trained on.
    #[arg(long, requires = "supernet_checkpoint")]
    pub data: Option<PathBuf>,
    /// Built-in space name or JSON file; defaults to the checkpoint's space.
    #[arg(long)]
    pub space: Option<String>,
    #[arg(long)]
    pub constraint_macs: Option<u64>,
    /// JSON evolution settings.
    #[arg(long)]
    pub evo_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Score genes with a seeded separable landscape.
    #[arg(long)]
    pub synthetic_fitness: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Continue from the run directory's saved population.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    /// Fixture name or ArchConfig JSON file.
    #[arg(long)]
    pub arch: String,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sub-network of a super-network checkpoint (search output or bare
    /// gene array); the largest one by default.
    #[arg(long)]
    pub gene: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn config(m: impl Into<String>) -> Self {
        CliError::Config(m.into())
    }
}

impl From<resnas::Error> for CliError {
    fn from(e: resnas::Error) -> Self {
        use resnas::Error as E;
        match e {
            E::Diverged { .. } | E::NonFinite { .. } | E::Csv(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers == 0 {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
        eprintln!("error: cannot start {} workers: {e}", cli.workers);
        return ExitCode::from(3);
    }
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::TrainSupernet(a) => commands::train_supernet(a),
        Command::Search(a) => commands::search(a, cli.workers),
        Command::Cost(a) => commands::cost(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
