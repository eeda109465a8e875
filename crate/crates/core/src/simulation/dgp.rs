//! Data-generating processes for the Monte Carlo harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SubjectRecord, WeightScheme};
use crate::error::{Error, Result};
use crate::estimators::fit;
use crate::variance::influence_theta;

/// Hazard model used to draw event times. Both have hazards constant in
/// time given `z`, so inverse-transform sampling is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HazardModel {
    /// `lambda_0 + z' theta_0`.
    Additive,
    /// `lambda_0 exp(z' beta)`; the additive model is then misspecified.
    Proportional { beta: Vec<f64> },
}

/// Phase-II selection probabilities, case-control style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub event_prob: f64,
    pub nonevent_prob: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            event_prob: 1.0,
            nonevent_prob: 0.25,
        }
    }
}

/// Phase-I auxiliary variables available for calibration. Both use a
/// surrogate `z + U(-noise, noise)` of every covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Auxiliary {
    /// `(1, surrogate of z_1, Delta)`.
    Simple { noise: f64 },
    /// `(1, theta influence rows of a random-sampling fit on the
    /// surrogates)`, a strong predictor of the true influence rows.
    SurrogateInfluence { noise: f64 },
}

impl Default for Auxiliary {
    fn default() -> Self {
        Auxiliary::SurrogateInfluence { noise: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub n: usize,
    pub theta0: Vec<f64>,
    /// Constant baseline hazard `lambda_0`.
    pub baseline: f64,
    /// Independent uniform covariate ranges `[lo, hi]`, one per covariate.
    pub covariate_ranges: Vec<[f64; 2]>,
    /// Censoring is `min(U(0, c_max), tau)`.
    pub c_max: f64,
    pub tau: f64,
    #[serde(default = "default_model")]
    pub model: HazardModel,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub auxiliary: Auxiliary,
    /// Smallest admissible additive hazard over the covariate box.
    #[serde(default = "default_floor")]
    pub hazard_floor: f64,
}

fn default_model() -> HazardModel {
    HazardModel::Additive
}

fn default_floor() -> f64 {
    1e-3
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n: 2000,
            theta0: vec![0.5, -0.3],
            baseline: 0.5,
            covariate_ranges: vec![[0.0, 1.0], [0.0, 1.0]],
            c_max: 4.0,
            tau: 2.0,
            model: HazardModel::Additive,
            sampling: Sampling::default(),
            auxiliary: Auxiliary::default(),
            hazard_floor: default_floor(),
        }
    }
}

impl DgpConfig {
    pub fn p(&self) -> usize {
        self.theta0.len()
    }

    /// Minimum of `lambda_0 + z' theta_0` over the covariate box.
    pub fn min_additive_hazard(&self) -> f64 {
        self.baseline
            + self
                .theta0
                .iter()
                .zip(&self.covariate_ranges)
                .map(|(t, r)| (t * r[0]).min(t * r[1]))
                .sum::<f64>()
    }

    pub fn check(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ConfigError(m));
        if self.n < 2 {
            return fail(format!("n must be at least 2, got {}", self.n));
        }
        if self.covariate_ranges.len() != self.p() {
            return fail("covariate_ranges must have one entry per theta0 coordinate".into());
        }
        if self.covariate_ranges.iter().any(|r| !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite()) {
            return fail("covariate ranges must be finite with lo <= hi".into());
        }
        if !(self.baseline > 0.0) || !(self.tau > 0.0) || !(self.c_max > 0.0) {
            return fail("baseline, tau and c_max must be positive".into());
        }
        if self.theta0.iter().any(|t| !t.is_finite()) {
            return fail("theta0 must be finite".into());
        }
        if !(self.hazard_floor > 0.0) {
            return fail("hazard_floor must be positive".into());
        }
        match &self.model {
            HazardModel::Additive => {
                let h = self.min_additive_hazard();
                if h < self.hazard_floor {
                    return fail(format!(
                        "baseline + z'theta0 reaches {h} on the covariate box, below hazard_floor {}",
                        self.hazard_floor
                    ));
                }
            }
            HazardModel::Proportional { beta } => {
                if beta.len() != self.p() || beta.iter().any(|b| !b.is_finite()) {
                    return fail("beta must be finite with one entry per covariate".into());
                }
            }
        }
        let s = &self.sampling;
        for prob in [s.event_prob, s.nonevent_prob] {
            if !(crate::data::DEFAULT_SIGMA..=1.0).contains(&prob) {
                return fail(format!("selection probability {prob} outside [1e-6, 1]"));
            }
        }
        let noise = match self.auxiliary {
            Auxiliary::Simple { noise } | Auxiliary::SurrogateInfluence { noise } => noise,
        };
        if !(noise >= 0.0 && noise.is_finite()) {
            return fail("auxiliary noise must be finite and nonnegative".into());
        }
        Ok(())
    }

    /// Hazard for covariate vector `z`.
    pub fn hazard(&self, z: &[f64]) -> f64 {
        match &self.model {
            HazardModel::Additive => {
                self.baseline + z.iter().zip(&self.theta0).map(|(a, b)| a * b).sum::<f64>()
            }
            HazardModel::Proportional { beta } => {
                self.baseline * z.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>().exp()
            }
        }
    }
}

/// Everything drawn for one subject before observation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSubject {
    pub z: Vec<f64>,
    pub surrogate: Vec<f64>,
    pub event_time: f64,
    pub censor_time: f64,
    pub selected: bool,
}

impl LatentSubject {
    pub fn time(&self) -> f64 {
        self.event_time.min(self.censor_time)
    }

    pub fn event(&self) -> bool {
        self.event_time <= self.censor_time
    }
}

/// RNG for replicate `rep`: one ChaCha8 stream per replicate.
pub fn replicate_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws the latent cohort for `(seed, rep)`.
pub fn draw_latent(config: &DgpConfig, seed: u64, rep: u64) -> Result<Vec<LatentSubject>> {
    config.check()?;
    let mut rng = replicate_rng(seed, rep);
    let noise = match config.auxiliary {
        Auxiliary::Simple { noise } | Auxiliary::SurrogateInfluence { noise } => noise,
    };
    Ok((0..config.n)
        .map(|_| {
            let z: Vec<f64> = config
                .covariate_ranges
                .iter()
                .map(|r| uniform(&mut rng, r[0], r[1]))
                .collect();
            let surrogate = z.iter().map(|v| v + uniform(&mut rng, -noise, noise)).collect();
            // 1 - U lies in (0, 1], so the log is finite.
            let event_time = -(1.0 - rng.random::<f64>()).ln() / config.hazard(&z);
            let censor_time = uniform(&mut rng, 0.0, config.c_max).min(config.tau);
            let event = event_time <= censor_time;
            let prob = if event {
                config.sampling.event_prob
            } else {
                config.sampling.nonevent_prob
            };
            let selected = rng.random::<f64>() < prob;
            LatentSubject {
                z,
                surrogate,
                event_time,
                censor_time,
                selected,
            }
        })
        .collect())
}

/// One replicate: the complete cohort and its two-phase version.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub cohort: Dataset,
    pub two_phase: Dataset,
}

fn selection_prob(config: &DgpConfig, event: bool) -> f64 {
    if event {
        config.sampling.event_prob
    } else {
        config.sampling.nonevent_prob
    }
}

/// Builds the complete cohort from latent draws.
pub fn complete_cohort(config: &DgpConfig, latent: &[LatentSubject]) -> Result<Dataset> {
    let records = latent
        .iter()
        .map(|s| SubjectRecord::complete(s.time(), s.event(), s.z.clone()))
        .collect();
    Dataset::new(records, config.tau)
}

/// Phase-I auxiliaries for every subject.
pub fn auxiliaries(config: &DgpConfig, latent: &[LatentSubject]) -> Result<Vec<Vec<f64>>> {
    match config.auxiliary {
        Auxiliary::Simple { .. } => Ok(latent
            .iter()
            .map(|s| vec![1.0, s.surrogate[0], if s.event() { 1.0 } else { 0.0 }])
            .collect()),
        Auxiliary::SurrogateInfluence { .. } => {
            let records = latent
                .iter()
                .map(|s| SubjectRecord::complete(s.time(), s.event(), s.surrogate.clone()))
                .collect();
            let surrogate = Dataset::new(records, config.tau)?;
            let f = fit(&surrogate, &WeightScheme::Unit)?;
            let rows = influence_theta(&surrogate, &WeightScheme::Unit, &f)?;
            Ok((0..latent.len())
                .map(|i| std::iter::once(1.0).chain(rows.rows.row(i).iter().copied()).collect())
                .collect())
        }
    }
}

/// Generates replicate `rep`: `T = min(T~, C)`, selection `R ~ Bernoulli(pi)`
/// with `pi` depending on `Delta`, covariates masked when `R = 0`.
pub fn generate(config: &DgpConfig, seed: u64, rep: u64) -> Result<Replicate> {
    let latent = draw_latent(config, seed, rep)?;
    let cohort = complete_cohort(config, &latent)?;
    let aux = auxiliaries(config, &latent)?;
    let records = latent
        .iter()
        .zip(aux)
        .map(|(s, v)| SubjectRecord {
            time: s.time(),
            event: s.event(),
            covariates: s.z.iter().map(|&z| s.selected.then_some(z)).collect(),
            auxiliary: v,
            selected: s.selected,
            sampling_prob: selection_prob(config, s.event()),
        })
        .collect();
    Ok(Replicate {
        cohort,
        two_phase: Dataset::new(records, config.tau)?,
    })
}

/// Large-sample values the estimators converge to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoTrue {
    pub theta: Vec<f64>,
    /// `Lambda(s)` at the requested time.
    pub lambda: f64,
    /// `Lambda(s | z)` at the requested time and covariate.
    pub pred: f64,
    /// Monte Carlo uncertainty of `theta` (robust standard errors).
    pub theta_se: Vec<f64>,
    /// Total number of subjects used.
    pub n: usize,
}

/// Approximates the root of the population estimating equations by
/// averaging random-sampling fits on `batches` independent complete cohorts
/// of size `n`, drawn from streams `u64::MAX - b` of `seed`.
pub fn pseudo_true(
    config: &DgpConfig,
    n: usize,
    batches: usize,
    seed: u64,
    s: f64,
    z: &[f64],
) -> Result<PseudoTrue> {
    if batches == 0 {
        return Err(Error::ConfigError("pseudo-true computation needs at least one batch".into()));
    }
    let big = DgpConfig {
        n,
        ..config.clone()
    };
    let p = config.p();
    let mut theta = vec![0.0; p];
    let mut var = vec![0.0; p];
    let (mut lambda, mut pred) = (0.0, 0.0);
    for b in 0..batches {
        let latent = draw_latent(&big, seed, u64::MAX - b as u64)?;
        let cohort = complete_cohort(&big, &latent)?;
        let f = fit(&cohort, &WeightScheme::Unit)?;
        let rows = influence_theta(&cohort, &WeightScheme::Unit, &f)?;
        let se = crate::variance::robust_variance(&rows, &cohort, &WeightScheme::Unit)?.standard_errors();
        for j in 0..p {
            theta[j] += f.theta[j] / batches as f64;
            var[j] += se[j] * se[j] / (batches * batches) as f64;
        }
        lambda += f.lambda.eval(s)? / batches as f64;
        pred += f.predict(z, s)? / batches as f64;
    }
    Ok(PseudoTrue {
        theta,
        lambda,
        pred,
        theta_se: var.iter().map(|v| v.sqrt()).collect(),
        n: n * batches,
    })
}
