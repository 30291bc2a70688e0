//! `mracl` command-line front end.
//!
//! Exit codes: 0 ok, 2 config error, 3 runtime or numeric error, 4 output conflict.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("output conflict: {0}")]
    Conflict(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Conflict(_) => 4,
        }
    }
}

impl From<mracl::Error> for CliError {
    fn from(e: mracl::Error) -> Self {
        match e {
            mracl::Error::Config { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "mracl", version, about = "Radial contrastive learning on a synthetic referring-segmentation testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the factor grid and hyperparameter sweeps.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Anisotropy histogram, gradient profile and metrics for a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check every invariant of a dataset directory.
    ValidateData {
        #[arg(long)]
        data: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, force, seed } => commands::gen_data(&config, out.as_deref(), force, seed),
        Command::Train {
            config,
            data,
            out,
            force,
            seed,
        } => commands::train(&config, data.as_deref(), out.as_deref(), force, seed),
        Command::Ablate {
            config,
            data,
            out,
            force,
            seed,
            jobs,
        } => commands::ablate(&config, data.as_deref(), out.as_deref(), force, seed, jobs),
        Command::Diagnose {
            checkpoint,
            data,
            out,
            force,
            seed,
        } => commands::diagnose(&checkpoint, &data, &out, force, seed),
        Command::ValidateData { data } => commands::validate_data(&data),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
