//! `dismax`: train, calibrate and evaluate DisMax classifiers for
//! out-of-distribution detection.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dismax_core::Exec;

/// Bad invocation that clap could not catch.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "dismax",
    version,
    about = "DisMax training, calibration and OOD evaluation"
)]
pub struct Cli {
    /// Directory for generated datasets and manifests of runs without a
    /// primary artifact
    #[arg(
        long,
        global = true,
        env = "DISMAX_CACHE_DIR",
        default_value = ".dismax-cache"
    )]
    pub cache_dir: PathBuf,
    /// Disable data parallelism
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Only log warnings and errors
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write a checkpoint
    Train(commands::TrainArgs),
    /// Fit the temperature on the held-out split and store it in the checkpoint
    Calibrate(commands::CalibrateArgs),
    /// Score ID and OOD sets, write the score dump and detection report
    Evaluate(commands::EvaluateArgs),
    /// Recompute detection tables from saved score dumps
    Report(commands::ReportArgs),
    /// Generate synthetic datasets
    #[command(subcommand)]
    Synth(commands::SynthCommand),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use dismax_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::MissingCalibration(_) => EXIT_USAGE,
                E::Numeric(_) => EXIT_NUMERIC,
                E::Shape(_) | E::Data(_) | E::Format(_) | E::Io(_) | E::Json(_) => EXIT_DATA,
            };
        }
        if cause.is::<serde_json::Error>() || cause.is::<std::io::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
