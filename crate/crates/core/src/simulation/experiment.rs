//! Monte Carlo experiment driver and metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::dgp::{generate, pseudo_true, DgpConfig, HazardModel, Replicate};
use crate::calibration::{solve_gamma, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE};
use crate::data::{Dataset, WeightScheme};
use crate::error::{Error, Result};
use crate::estimators::fit;
use crate::parallel::Execution;
use crate::variance::{
    influence_rows, model_based_variance, penalty_term, robust_variance, ProjectionMoments, Target,
};

/// Smallest number of replicates an experiment accepts.
pub const MIN_REPLICATES: u64 = 200;

/// Values the estimators are compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub theta: Vec<f64>,
    pub lambda: f64,
    pub pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dgp: DgpConfig,
    pub replicates: u64,
    pub seed: u64,
    /// Time at which `Lambda(s)` and `Lambda(s|z)` are estimated.
    #[serde(default = "default_s")]
    pub s_star: f64,
    /// Covariate value for `Lambda(s|z)`.
    #[serde(default = "default_z")]
    pub z_star: Vec<f64>,
    /// Wald intervals have level `1 - alpha`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Fixed comparison values. When absent they are derived from the
    /// model (additive) or from one large random-sampling fit.
    #[serde(default)]
    pub truth: Option<Truth>,
    #[serde(default = "default_pseudo_n")]
    pub pseudo_true_n: usize,
    #[serde(default = "default_pseudo_batches")]
    pub pseudo_true_batches: usize,
}

fn default_s() -> f64 {
    1.0
}

fn default_z() -> Vec<f64> {
    vec![0.5, 0.5]
}

fn default_alpha() -> f64 {
    0.05
}

fn default_pseudo_n() -> usize {
    1_000_000
}

fn default_pseudo_batches() -> usize {
    10
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dgp: DgpConfig::default(),
            replicates: 1000,
            seed: 1,
            s_star: default_s(),
            z_star: default_z(),
            alpha: default_alpha(),
            truth: None,
            pseudo_true_n: default_pseudo_n(),
            pseudo_true_batches: default_pseudo_batches(),
        }
    }
}

impl ExperimentConfig {
    pub fn check(&self) -> Result<()> {
        self.dgp.check()?;
        if self.replicates < MIN_REPLICATES {
            return Err(Error::ConfigError(format!(
                "replicates must be at least {MIN_REPLICATES}, got {}",
                self.replicates
            )));
        }
        if !(self.s_star > 0.0 && self.s_star <= self.dgp.tau) {
            return Err(Error::ConfigError(format!("s_star must lie in (0, tau], got {}", self.s_star)));
        }
        if self.z_star.len() != self.dgp.p() {
            return Err(Error::ConfigError("z_star must have one entry per covariate".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::ConfigError(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if let Some(t) = &self.truth {
            if t.theta.len() != self.dgp.p() {
                return Err(Error::ConfigError("truth.theta must have one entry per covariate".into()));
            }
        }
        Ok(())
    }

    /// Comparison values: the configured ones, the model values under the
    /// additive model, or a large-sample pseudo-true fit otherwise.
    pub fn resolve_truth(&self) -> Result<Truth> {
        if let Some(t) = &self.truth {
            return Ok(t.clone());
        }
        let d = &self.dgp;
        match d.model {
            HazardModel::Additive => Ok(Truth {
                theta: d.theta0.clone(),
                lambda: d.baseline * self.s_star,
                pred: d.hazard(&self.z_star) * self.s_star,
            }),
            HazardModel::Proportional { .. } => {
                log::info!(
                    "computing pseudo-true values from {} cohorts of {}",
                    self.pseudo_true_batches,
                    self.pseudo_true_n
                );
                let pt = pseudo_true(
                    d,
                    self.pseudo_true_n,
                    self.pseudo_true_batches,
                    self.seed,
                    self.s_star,
                    &self.z_star,
                )?;
                Ok(Truth {
                    theta: pt.theta,
                    lambda: pt.lambda,
                    pred: pt.pred,
                })
            }
        }
    }

    pub fn targets(&self) -> Vec<Target> {
        vec![
            Target::Theta,
            Target::Lambda { s: self.s_star },
            Target::Pred {
                s: self.s_star,
                z: self.z_star.clone(),
            },
        ]
    }

    /// Names of the scalar estimators, in report order.
    pub fn estimator_names(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for scheme in SCHEMES {
            for j in 0..self.dgp.p() {
                out.push((scheme.to_string(), format!("theta[{}]", j + 1)));
            }
            out.push((scheme.to_string(), "lambda".to_string()));
            out.push((scheme.to_string(), "pred".to_string()));
        }
        out
    }
}

const SCHEMES: [&str; 3] = ["rs", "ipw", "cal"];

/// Per-replicate estimates, in the order of `estimator_names`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimates {
    pub rep: u64,
    pub values: Vec<f64>,
    pub se_robust: Vec<f64>,
    pub se_model: Vec<f64>,
    /// Traces of the IPW penalty and of the calibrated penalty, both for
    /// the IPW `theta` rows with penalty-weighted projection moments.
    pub penalty_trace_ipw: f64,
    pub penalty_trace_cal: f64,
    /// Max-norm of the calibration constraint residual.
    pub calibration_residual: f64,
}

fn scheme_estimates(
    dataset: &Dataset,
    scheme: &WeightScheme,
    targets: &[Target],
    out: &mut ReplicateEstimates,
) -> Result<crate::variance::InfluenceRows> {
    let f = fit(dataset, scheme)?;
    let rows = influence_rows(&f, targets)?;
    for r in &rows {
        let robust = robust_variance(r, dataset, scheme)?.standard_errors();
        let model = model_based_variance(dataset, scheme, &f, r)?.standard_errors();
        let values: Vec<f64> = match &r.target {
            Target::Theta => f.theta.iter().copied().collect(),
            Target::Lambda { s } => vec![f.lambda.eval(*s)?],
            Target::Pred { s, z } => vec![f.predict(z, *s)?],
        };
        out.values.extend(values);
        out.se_robust.extend(robust);
        out.se_model.extend(model);
    }
    Ok(rows.into_iter().next().expect("theta is the first target"))
}

/// Fits every scheme on one generated replicate.
pub fn run_replicate(config: &ExperimentConfig, rep: u64) -> Result<ReplicateEstimates> {
    let Replicate { cohort, two_phase } = generate(&config.dgp, config.seed, rep)?;
    let targets = config.targets();
    let mut out = ReplicateEstimates {
        rep,
        values: Vec::new(),
        se_robust: Vec::new(),
        se_model: Vec::new(),
        penalty_trace_ipw: 0.0,
        penalty_trace_cal: 0.0,
        calibration_residual: 0.0,
    };
    scheme_estimates(&cohort, &WeightScheme::Unit, &targets, &mut out)?;
    let ipw_rows = scheme_estimates(&two_phase, &WeightScheme::Ipw, &targets, &mut out)?;
    let cal = solve_gamma(&two_phase, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER)?;
    out.calibration_residual = cal.max_residual();
    let cal_scheme = cal.scheme();
    scheme_estimates(&two_phase, &cal_scheme, &targets, &mut out)?;
    out.penalty_trace_ipw = penalty_term(&ipw_rows, &two_phase, &WeightScheme::Ipw, ProjectionMoments::PenaltyWeighted)?.trace();
    out.penalty_trace_cal =
        penalty_term(&ipw_rows, &two_phase, &cal_scheme, ProjectionMoments::PenaltyWeighted)?.trace();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalMetrics {
    pub mean_se: f64,
    pub mean_se_mc_se: f64,
    /// `mean_se / mc_sd`.
    pub se_ratio: f64,
    pub coverage: f64,
    pub coverage_mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub scheme: String,
    pub target: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub bias_mc_se: f64,
    pub mc_sd: f64,
    pub mc_sd_mc_se: f64,
    pub robust: IntervalMetrics,
    pub model_based: IntervalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: String,
    pub config: ExperimentConfig,
    pub truth: Truth,
    pub replicates: u64,
    pub failed: u64,
    pub estimators: Vec<EstimatorMetrics>,
}

/// Report plus the per-replicate estimates it summarizes.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub estimates: Vec<ReplicateEstimates>,
}

pub const REPORT_SCHEMA_VERSION: &str = "1";

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sd(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}

fn truth_values(truth: &Truth) -> Vec<f64> {
    let mut per_scheme = truth.theta.clone();
    per_scheme.extend([truth.lambda, truth.pred]);
    SCHEMES.iter().flat_map(|_| per_scheme.clone()).collect()
}

fn interval_metrics(values: &[f64], ses: &[f64], truth: f64, z: f64, mc_sd: f64) -> IntervalMetrics {
    let r = values.len() as f64;
    let covered = values
        .iter()
        .zip(ses)
        .filter(|(v, s)| (*v - truth).abs() <= z * *s)
        .count() as f64;
    let coverage = covered / r;
    let mean_se = mean(ses);
    IntervalMetrics {
        mean_se,
        mean_se_mc_se: sd(ses) / r.sqrt(),
        se_ratio: mean_se / mc_sd,
        coverage,
        coverage_mc_se: (coverage * (1.0 - coverage) / r).sqrt(),
    }
}

/// Summarizes replicate estimates against `truth`.
pub fn summarize(config: &ExperimentConfig, truth: &Truth, estimates: &[ReplicateEstimates], failed: u64) -> MetricsReport {
    let z = Normal::standard().inverse_cdf(1.0 - config.alpha / 2.0);
    let truths = truth_values(truth);
    let r = estimates.len() as f64;
    let estimators = config
        .estimator_names()
        .into_iter()
        .enumerate()
        .map(|(j, (scheme, target))| {
            let values: Vec<f64> = estimates.iter().map(|e| e.values[j]).collect();
            let robust: Vec<f64> = estimates.iter().map(|e| e.se_robust[j]).collect();
            let model: Vec<f64> = estimates.iter().map(|e| e.se_model[j]).collect();
            let m = mean(&values);
            let s = sd(&values);
            EstimatorMetrics {
                scheme,
                target,
                truth: truths[j],
                mean: m,
                bias: m - truths[j],
                bias_mc_se: s / r.sqrt(),
                mc_sd: s,
                mc_sd_mc_se: s / (2.0 * (r - 1.0)).sqrt(),
                robust: interval_metrics(&values, &robust, truths[j], z, s),
                model_based: interval_metrics(&values, &model, truths[j], z, s),
            }
        })
        .collect();
    MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        config: config.clone(),
        truth: truth.clone(),
        replicates: config.replicates,
        failed,
        estimators,
    }
}

/// Runs every replicate and summarizes. Fails when more than 1% of the
/// replicates fail.
pub fn run_experiment(config: &ExperimentConfig, execution: Execution) -> Result<ExperimentOutcome> {
    config.check()?;
    let truth = config.resolve_truth()?;
    let results = execution.map(config.replicates, |rep| run_replicate(config, rep));
    let mut estimates = Vec::with_capacity(results.len());
    let mut first_error = None;
    let mut failed = 0u64;
    for r in results {
        match r {
            Ok(e) => estimates.push(e),
            Err(e) => {
                failed += 1;
                log::warn!("replicate failed: {e}");
                first_error.get_or_insert(e.to_string());
            }
        }
    }
    if failed * 100 > config.replicates {
        return Err(Error::TooManyFailures {
            failed: failed as usize,
            total: config.replicates as usize,
            first: first_error.unwrap_or_default(),
        });
    }
    let report = summarize(config, &truth, &estimates, failed);
    Ok(ExperimentOutcome { report, estimates })
}

impl MetricsReport {
    /// Plain-text table with the same content as the JSON report.
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let d = &self.config.dgp;
        let _ = writeln!(
            s,
            "n = {}, replicates = {} ({} failed), seed = {}, s* = {}, z* = {:?}, level = {}",
            d.n,
            self.replicates,
            self.failed,
            self.config.seed,
            self.config.s_star,
            self.config.z_star,
            1.0 - self.config.alpha
        );
        let _ = writeln!(
            s,
            "{:<5} {:<9} {:>9} {:>9} {:>9} {:>8} {:>8} | {:>8} {:>6} {:>6} | {:>8} {:>6} {:>6}",
            "scheme", "target", "truth", "mean", "bias", "mc_se", "mc_sd", "se_rob", "ratio", "cover", "se_mod", "ratio", "cover"
        );
        for e in &self.estimators {
            let _ = writeln!(
                s,
                "{:<5} {:<9} {:>9.5} {:>9.5} {:>9.5} {:>8.5} {:>8.5} | {:>8.5} {:>6.3} {:>6.3} | {:>8.5} {:>6.3} {:>6.3}",
                e.scheme,
                e.target,
                e.truth,
                e.mean,
                e.bias,
                e.bias_mc_se,
                e.mc_sd,
                e.robust.mean_se,
                e.robust.se_ratio,
                e.robust.coverage,
                e.model_based.mean_se,
                e.model_based.se_ratio,
                e.model_based.coverage
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_few_replicates() {
        let c = ExperimentConfig {
            replicates: 0,
            ..ExperimentConfig::default()
        };
        assert!(matches!(run_experiment(&c, Execution::Sequential), Err(Error::ConfigError(_))));
    }

    #[test]
    fn replicate_has_every_estimator() {
        let c = ExperimentConfig {
            dgp: DgpConfig {
                n: 300,
                ..DgpConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let r = run_replicate(&c, 0).unwrap();
        assert_eq!(r.values.len(), c.estimator_names().len());
        assert_eq!(r.se_model.len(), 12);
        assert!(r.se_robust.iter().all(|s| s.is_finite() && *s > 0.0));
        assert!(r.penalty_trace_cal <= r.penalty_trace_ipw);
    }
}
