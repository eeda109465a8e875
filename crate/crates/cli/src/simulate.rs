use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use zee::parallel::with_jobs;
use zee::simulation::{run_experiment, ExperimentConfig};
use zee::Execution;

use crate::output::{emit, OutputDir, RunManifest};
use crate::{CliResult, Failure};

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Experiment config (`.toml` or `.json`).
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for report.json, report.txt, estimates.csv and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the number of replicates.
    #[arg(long)]
    pub replicates: Option<u64>,
    /// Override the seed; all randomness derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the cohort size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Run replicates one after another on the calling thread.
    #[arg(long)]
    pub sequential: bool,
}

fn read_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
        _ => toml::from_str(&text).map_err(|e| e.to_string()),
    };
    parsed.map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn estimates_csv(outcome: &zee::simulation::ExperimentOutcome) -> String {
    let mut s = String::from("rep");
    for e in &outcome.report.estimators {
        let name = format!("{}_{}", e.scheme, e.target.replace(['[', ']'], ""));
        s.push_str(&format!(",{name},{name}_se_robust,{name}_se_model"));
    }
    s.push('\n');
    for r in &outcome.estimates {
        s.push_str(&r.rep.to_string());
        for j in 0..r.values.len() {
            s.push_str(&format!(",{},{},{}", r.values[j], r.se_robust[j], r.se_model[j]));
        }
        s.push('\n');
    }
    s
}

pub fn run(args: SimulateArgs, recorded: Vec<String>) -> CliResult<()> {
    let start = Instant::now();
    let mut config = read_config(&args.config)?;
    if let Some(r) = args.replicates {
        config.replicates = r;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(n) = args.n {
        config.dgp.n = n;
    }
    if args.jobs == Some(0) {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    config.check()?;
    config.truth = Some(config.resolve_truth()?);
    let execution = if args.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    log::info!("running {} replicates at n = {}", config.replicates, config.dgp.n);
    let outcome = with_jobs(args.jobs, || run_experiment(&config, execution))?;
    let text = outcome.report.to_text();
    emit(&text)?;

    let mut files = OutputDir::new(&args.out);
    files.add_json("report.json", &outcome.report)?;
    files.add("report.txt", text);
    files.add("estimates.csv", estimates_csv(&outcome));
    let mut manifest = RunManifest::new("simulate", recorded, serde_json::to_value(&config)?);
    manifest.seed = Some(config.seed);
    manifest.add_input(&args.config)?;
    files.write(manifest, start.elapsed())
}
