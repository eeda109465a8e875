//! Variance estimators against Monte Carlo variances of the point
//! estimators over independent replicates of one DGP.

use zee::simulation::dgp::draw_latent;
use zee::simulation::experiment::ReplicateEstimates;
use zee::simulation::{run_experiment, DgpConfig, ExperimentConfig, ExperimentOutcome, HazardModel, Truth};
use zee::Execution;

const SEED: u64 = 20261017;
const N: usize = 2000;

fn median_event_time(config: &DgpConfig) -> f64 {
    let big = DgpConfig { n: 20_000, ..config.clone() };
    let mut t: Vec<f64> = draw_latent(&big, SEED, u64::MAX)
        .unwrap()
        .iter()
        .filter(|s| s.event())
        .map(|s| s.time())
        .collect();
    t.sort_by(f64::total_cmp);
    t[t.len() / 2]
}

fn run(model: HazardModel, replicates: u64, truth: Option<Truth>) -> ExperimentOutcome {
    let dgp = DgpConfig {
        n: N,
        model,
        ..DgpConfig::default()
    };
    let s_star = median_event_time(&dgp);
    let config = ExperimentConfig {
        dgp,
        replicates,
        seed: SEED,
        s_star,
        truth,
        ..ExperimentConfig::default()
    };
    run_experiment(&config, Execution::Parallel).unwrap()
}

/// `(mean estimated variance / MC variance) - 1` for column `j`.
fn relative_gap(estimates: &[ReplicateEstimates], j: usize, model: bool) -> f64 {
    let r = estimates.len() as f64;
    let values: Vec<f64> = estimates.iter().map(|e| e.values[j]).collect();
    let mean = values.iter().sum::<f64>() / r;
    let mc = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    let est = estimates
        .iter()
        .map(|e| if model { e.se_model[j] } else { e.se_robust[j] }.powi(2))
        .sum::<f64>()
        / r;
    est / mc - 1.0
}

fn column(outcome: &ExperimentOutcome, scheme: &str, target: &str) -> usize {
    outcome
        .report
        .estimators
        .iter()
        .position(|e| e.scheme == scheme && e.target == target)
        .unwrap()
}

#[test]
fn additive_model_variances() {
    let out = run(HazardModel::Additive, 2000, None);
    let est = &out.estimates;
    for target in ["theta[1]", "theta[2]", "lambda", "pred"] {
        let j = column(&out, "rs", target);
        let (robust, model) = (relative_gap(est, j, false), relative_gap(est, j, true));
        println!("rs {target}: robust {robust:+.3} model {model:+.3}");
        assert!(robust.abs() <= 0.15, "rs {target} robust {robust}");
        assert!(model.abs() <= 0.15, "rs {target} model {model}");
    }
    for target in ["theta[1]", "theta[2]"] {
        let j = column(&out, "rs", target);
        let (robust, model) = (relative_gap(est, j, false), relative_gap(est, j, true));
        assert!(robust.abs() <= 0.10 && model.abs() <= 0.10, "rs {target}: {robust} {model}");
        assert!(((1.0 + model) / (1.0 + robust) - 1.0).abs() <= 0.10);
        for scheme in ["ipw", "cal"] {
            let j = column(&out, scheme, target);
            let robust = relative_gap(est, j, false);
            println!("{scheme} {target}: robust {robust:+.3}");
            assert!(robust.abs() <= 0.10, "{scheme} {target} robust {robust}");
        }
    }
}

#[test]
fn misspecified_model_robust_variance() {
    let truth = Truth {
        theta: vec![0.44702218134415195, -0.3355972202346668],
        lambda: f64::NAN,
        pred: f64::NAN,
    };
    let out = run(HazardModel::Proportional { beta: vec![0.8, -0.6] }, 2000, Some(truth));
    for scheme in ["rs", "ipw", "cal"] {
        for target in ["theta[1]", "theta[2]"] {
            let j = column(&out, scheme, target);
            let (robust, model) = (relative_gap(&out.estimates, j, false), relative_gap(&out.estimates, j, true));
            println!("{scheme} {target}: robust {robust:+.3} model {model:+.3} (not asserted)");
            assert!(robust.abs() <= 0.15, "{scheme} {target} robust {robust}");
        }
    }
}
