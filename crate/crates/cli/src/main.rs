//! `duofield`: generate scenes, train, decompose, evaluate and ablate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use duofield::Error;

use config::{Flags, RunConfig};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NAN: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "duofield", version, about = "Static/dynamic scene decomposition with hash-grid radiance fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Export a synthetic scene's ground truth
    Generate(Flags),
    /// Train a model and write its checkpoint and step log
    Train(Flags),
    /// Render the nine decomposition maps of every (or one) frame
    Decompose {
        /// Checkpoint file or run directory
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Score a checkpoint and write metrics.json and metrics.csv
    Evaluate {
        /// Checkpoint file or run directory
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Train the full model plus one run per disabled component and report deltas
    Ablate(Flags),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => EXIT_CONFIG,
        Error::NonFinite { .. } => EXIT_NAN,
        Error::Io(_) | Error::Image(_) | Error::Json(_) | Error::Format { .. } => EXIT_IO,
    }
}

fn run(cli: Cli) -> duofield::Result<()> {
    match cli.command {
        Command::Generate(f) => commands::generate(&RunConfig::resolve(&f, "generate")?),
        Command::Train(f) => commands::train(&RunConfig::resolve(&f, "train")?),
        Command::Decompose { checkpoint, flags } => {
            let rc = RunConfig::resolve(&flags, "decompose")?;
            commands::decompose(&checkpoint, &flags, rc)
        }
        Command::Evaluate { checkpoint, flags } => {
            let rc = RunConfig::resolve(&flags, "evaluate")?;
            commands::evaluate_cmd(&checkpoint, &flags, rc)
        }
        Command::Ablate(f) => commands::ablate(&RunConfig::resolve(&f, "ablate")?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
