use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use serde::Serialize;
use zee::calibration::{DEFAULT_MAX_ITER, DEFAULT_TOLERANCE};
use zee::data::{load_csv_with_sigma, DEFAULT_SIGMA};
use zee::solve_gamma;

use crate::output::{emit, OutputDir, RunManifest};
use crate::{CliResult, Failure};

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    /// Two-phase CSV with auxiliary columns vtilde1..vtildeq.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub tau: f64,
    /// Stop when every constraint residual is at most this.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
    /// Write calibrate.json and manifest.json here.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CalibrateOutput {
    schema_version: &'static str,
    n: usize,
    q: usize,
    selected: usize,
    gamma: Vec<f64>,
    constraint_residual: Vec<f64>,
    max_residual: f64,
    deviance: f64,
    iterations: usize,
    converged: bool,
    weights: Vec<f64>,
}

pub fn run(args: CalibrateArgs, recorded: Vec<String>) -> CliResult<()> {
    let start = Instant::now();
    if !(args.tau > 0.0 && args.tau.is_finite()) {
        return Err(Failure::usage("--tau must be positive and finite"));
    }
    if !(args.tol > 0.0) {
        return Err(Failure::usage("--tol must be positive"));
    }
    let ds = load_csv_with_sigma(&args.data, None, args.tau, args.sigma)?;
    let sol = solve_gamma(&ds, args.tol, args.max_iter)?;
    let out = CalibrateOutput {
        schema_version: "1",
        n: ds.len(),
        q: ds.q(),
        selected: ds.records().iter().filter(|r| r.selected).count(),
        max_residual: sol.max_residual(),
        gamma: sol.gamma,
        constraint_residual: sol.constraint_residual,
        deviance: sol.deviance,
        iterations: sol.iterations,
        converged: sol.converged,
        weights: sol.weights,
    };
    emit(&(serde_json::to_string_pretty(&out)? + "\n"))?;
    if let Some(dir) = &args.out {
        let mut files = OutputDir::new(dir);
        files.add_json("calibrate.json", &out)?;
        let mut manifest = RunManifest::new("calibrate", recorded, serde_json::to_value(&args)?);
        manifest.add_input(&args.data)?;
        files.write(manifest, start.elapsed())?;
    }
    Ok(())
}
