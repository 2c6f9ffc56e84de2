//! `iol`: simulate online-learning agents, fit the inverse model, compare it
//! with stationary baselines and export analyses.
//!
//! Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numerical failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iol_core::IolError;

#[derive(Parser, Debug)]
#[command(name = "iol", version, about = "Inverse online learning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; must be empty unless --force is given.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed of the stage being run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate an online-learning agent and write corpus.jsonl and beliefs.jsonl.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the model and write checkpoint.json and report.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus (.jsonl or .csv).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to continue from (requires --resume).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue training from --checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Compare the model with stationary baselines on the held-out split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated baselines, e.g. bc-linear,cirl; an empty value keeps only the model row.
        #[arg(long, value_delimiter = ',')]
        baselines: Option<Vec<String>>,
    },
    /// Export weight timelines, policy shifts, beliefs and optional recovery score.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Simulator beliefs log; adds recovery.json.
        #[arg(long)]
        beliefs: Option<PathBuf>,
        #[arg(long)]
        n_bins: Option<usize>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<IolError>() {
            return e.exit_code() as u8;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { common } => commands::simulate(&common),
        Command::Train { common, data, checkpoint, resume } => commands::train(&common, &data, checkpoint.as_deref(), resume),
        Command::Evaluate { common, data, checkpoint, baselines } => {
            commands::evaluate(&common, &data, &checkpoint, baselines.as_deref())
        }
        Command::Analyze { common, data, checkpoint, beliefs, n_bins } => {
            commands::analyze(&common, &data, &checkpoint, beliefs.as_deref(), n_bins)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
