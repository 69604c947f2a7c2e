//! Command-line surface of the basin inversion pipeline.
//!
//! Every subcommand writes into a self-contained run directory given by
//! `--out` (or `--run` for `evaluate`). Exit codes: 0 on success, 1 for
//! usage, configuration or data errors, 2 for runtime failures.

mod commands;
mod plot;
mod runs;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use runs::RunMeta;

#[derive(Debug, Parser)]
#[command(name = "inverse-basin", version, about = "Recover basin characteristics from driver and streamflow series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// TOML config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding drivers.csv, response.csv and statics.csv.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Replaces the config's seed list with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpanArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Generate {
        #[arg(long, default_value_t = 32)]
        entities: usize,
        #[arg(long, default_value_t = 5475)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an inverse model (deterministic, probabilistic or phase-2 per config).
    TrainInverse(TrainArgs),
    /// Penalized fine-tuning from a probabilistic run, with temperature search.
    Ubl {
        #[command(flatten)]
        train: TrainArgs,
        /// Run directory of the probabilistic base model.
        #[arg(long)]
        base: PathBuf,
    },
    /// Train the streamflow model on observed or reconstructed statics.
    TrainForward {
        #[command(flatten)]
        train: TrainArgs,
        /// `observed`, or an inverse run directory whose estimates replace the statics.
        #[arg(long, default_value = "observed")]
        statics: String,
    },
    /// Score an inverse run and write its uncertainty report.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Overrides the data directory recorded in the run.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SpanArg::Test)]
        span: SpanArg,
    },
    /// Train under injected training-span noise over the configured grid.
    RobustnessSweep(TrainArgs),
    /// Merge evaluated runs into comparison tables and scatter plots.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (program name first), runs it and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match commands::execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
