//! `zee`: fit additive hazards models, solve calibration weights and run
//! Monte Carlo experiments from the command line.

mod calibrate;
mod fit;
mod output;
mod simulate;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "zee", version, about = "Additive hazards estimation under random and two-phase sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit theta and the cumulative baseline hazard, with standard errors.
    Fit(fit::FitArgs),
    /// Solve for calibration weights matching phase-I auxiliary totals.
    Calibrate(calibrate::CalibrateArgs),
    /// Run a Monte Carlo experiment from a TOML or JSON config.
    Simulate(simulate::SimulateArgs),
    /// Rerun the command recorded in a manifest.
    Replay(output::ReplayArgs),
}

/// A failed run: exit code and message.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Failure {
            code: 4,
            message: message.into(),
        }
    }
}

impl From<zee::Error> for Failure {
    fn from(e: zee::Error) -> Self {
        Failure {
            code: if e.is_data_error() { 2 } else { 3 },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::internal(format!("could not serialize output: {e}"))
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Runs a full argument vector (program name first).
pub fn run(args: Vec<String>) -> CliResult<()> {
    let cli = Cli::try_parse_from(&args).map_err(|e| {
        let code = if e.use_stderr() { 2 } else { 0 };
        let _ = e.print();
        Failure {
            code,
            message: String::new(),
        }
    })?;
    let recorded: Vec<String> = args.into_iter().skip(1).collect();
    match cli.command {
        Command::Fit(a) => fit::run(a, recorded),
        Command::Calibrate(a) => calibrate::run(a, recorded),
        Command::Simulate(a) => simulate::run(a, recorded),
        Command::Replay(a) => output::replay(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ZEE_LOG", "warn")).init();
    let args: Vec<String> = std::env::args().collect();
    match panic::catch_unwind(AssertUnwindSafe(|| run(args))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            if !f.message.is_empty() {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
        Err(_) => ExitCode::from(4),
    }
}
