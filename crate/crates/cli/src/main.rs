//! `femnet`: mesh point clouds, generate data, train and evaluate finite
//! element networks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use femnet::data::SplitName;
use femnet::dynamics::Variant;
use femnet::FenError;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, missing inputs or an invalid configuration.
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<FenError> for CliError {
    fn from(e: FenError) -> Self {
        match e {
            FenError::InvalidSpec(_) | FenError::KTooLarge { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "femnet", version, about = "Finite element networks for spatio-temporal forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Triangulate a point cloud and filter boundary slivers.
    Mesh {
        #[arg(long)]
        points: PathBuf,
        /// Skip sliver filtering.
        #[arg(long)]
        no_filter: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic dataset.
    GenData {
        /// Override the number of subsampled nodes.
        #[arg(long)]
        nodes: Option<usize>,
        /// Normalize with the statistics of another dataset.
        #[arg(long)]
        stats_from: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write checkpoints and the training log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        hidden_width: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Forecast one sequence from a given start frame.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long)]
        horizon: Option<usize>,
        /// Also write free-form and transport contributions and velocities.
        #[arg(long)]
        dump_terms: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        split: Option<SplitName>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on datasets of several resolutions.
    Superres {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "data", required = true)]
        datasets: Vec<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Mesh { points, no_filter, common } => commands::mesh(&common, &points, no_filter),
        Command::GenData { nodes, stats_from, common } => commands::gen_data(&common, nodes, stats_from.as_deref()),
        Command::Train { data, variant, hidden_width, epochs, common } => {
            commands::train(&common, &data, variant, hidden_width, epochs)
        }
        Command::Forecast { checkpoint, data, sequence, start, horizon, dump_terms, common } => {
            commands::forecast(&common, &checkpoint, &data, sequence, start, horizon, dump_terms)
        }
        Command::Eval { checkpoint, data, horizon, split, common } => {
            commands::eval(&common, &checkpoint, &data, horizon, split)
        }
        Command::Superres { checkpoint, datasets, horizon, common } => {
            commands::superres(&common, &checkpoint, &datasets, horizon)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
