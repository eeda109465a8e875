//! Exponential-tilting calibration of inverse-probability weights.
//!
//! The calibrated weights `w_i = R_i exp(-gamma' v_i) / pi_i` minimise the
//! Poisson deviance to the design weights `1 / pi_i` subject to the phase-II
//! weighted totals of the auxiliaries matching their phase-I totals. The
//! multiplier `gamma` is found by Newton's method on the convex dual
//!
//! ```text
//! g(gamma) = (1/N) [ sum_i (R_i/pi_i) exp(-gamma' v_i) + gamma' sum_i v_i ]
//! ```
//!
//! whose gradient is the constraint residual.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{validate, Dataset, WeightScheme};
use crate::error::{Error, Result};
use crate::linalg::spd_inverse;

pub const DEFAULT_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 50;
const ARMIJO: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MAX_HALVINGS: usize = 60;
/// Exponents beyond this make some weight overflow or vanish in `f64`.
const MAX_EXPONENT: f64 = 700.0;

/// Result of solving the calibration equations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSolution {
    pub gamma: Vec<f64>,
    pub weights: Vec<f64>,
    /// `(1/N) [sum_i v_i - sum_i R_i w_i v_i]`.
    pub constraint_residual: Vec<f64>,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl CalibrationSolution {
    pub fn scheme(&self) -> WeightScheme {
        WeightScheme::Calibrated {
            gamma: self.gamma.clone(),
        }
    }

    pub fn max_residual(&self) -> f64 {
        max_abs(&self.constraint_residual)
    }
}

/// Poisson deviance `G(w, base) = w log(w / base) - (w - base)` with
/// `0 log 0 = 0`.
pub fn poisson_deviance(w: f64, base: f64) -> f64 {
    let entropy = if w == 0.0 { 0.0 } else { w * (w / base).ln() };
    entropy - (w - base)
}

/// `w_i = R_i exp(-gamma' v_i) / pi_i`.
pub fn calibrated_weights(gamma: &[f64], dataset: &Dataset) -> Vec<f64> {
    dataset
        .records()
        .iter()
        .map(|r| {
            if !r.selected {
                return 0.0;
            }
            let tilt: f64 = gamma.iter().zip(&r.auxiliary).map(|(g, v)| g * v).sum();
            (-tilt).exp() / r.sampling_prob
        })
        .collect()
}

/// `(1/N) [sum_i v_i - sum_i R_i w_i v_i]`.
pub fn constraint_residual(dataset: &Dataset, weights: &[f64]) -> Vec<f64> {
    let q = dataset.q();
    let inv_n = 1.0 / dataset.len() as f64;
    let mut res = vec![0.0; q];
    for (r, &w) in dataset.records().iter().zip(weights) {
        for (k, v) in r.auxiliary.iter().enumerate() {
            res[k] += (v - w * v) * inv_n;
        }
    }
    res
}

/// Total deviance `sum_i R_i G(w_i, 1/pi_i)`.
pub fn total_deviance(dataset: &Dataset, weights: &[f64]) -> f64 {
    dataset
        .records()
        .iter()
        .zip(weights)
        .filter(|(r, _)| r.selected)
        .map(|(r, &w)| poisson_deviance(w, 1.0 / r.sampling_prob))
        .sum()
}

/// Dual objective, gradient and Hessian at `gamma`.
pub(crate) struct Dual {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

pub(crate) fn dual(dataset: &Dataset, gamma: &DVector<f64>) -> Dual {
    let q = dataset.q();
    let inv_n = 1.0 / dataset.len() as f64;
    let mut value = 0.0;
    let mut gradient = DVector::zeros(q);
    let mut hessian = DMatrix::zeros(q, q);
    for r in dataset.records() {
        let v = DVector::from_column_slice(&r.auxiliary);
        value += gamma.dot(&v) * inv_n;
        gradient += &v * inv_n;
        if r.selected {
            let w = (-gamma.dot(&v)).exp() / r.sampling_prob;
            value += w * inv_n;
            gradient -= &v * (w * inv_n);
            hessian += &v * v.transpose() * (w * inv_n);
        }
    }
    Dual {
        value,
        gradient,
        hessian,
    }
}

pub(crate) fn dual_value(dataset: &Dataset, gamma: &DVector<f64>) -> f64 {
    let inv_n = 1.0 / dataset.len() as f64;
    dataset
        .records()
        .iter()
        .map(|r| {
            let lin: f64 = gamma.iter().zip(&r.auxiliary).map(|(g, v)| g * v).sum();
            let tilt = if r.selected {
                (-lin).exp() / r.sampling_prob
            } else {
                0.0
            };
            (lin + tilt) * inv_n
        })
        .sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves the calibration equations for `gamma` by damped Newton steps on
/// the dual, starting from `gamma = 0`.
pub fn solve_gamma(dataset: &Dataset, tol: f64, max_iter: usize) -> Result<CalibrationSolution> {
    validate(dataset, &WeightScheme::Ipw)?;
    let q = dataset.q();
    if q == 0 {
        return Err(Error::SchemeDataMismatch(
            "calibration needs auxiliary variables".into(),
        ));
    }
    let v_scale = dataset
        .records()
        .iter()
        .flat_map(|r| r.auxiliary.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));

    let mut gamma = DVector::zeros(q);
    let mut iterations = 0;
    loop {
        let d = dual(dataset, &gamma);
        let residual = d.gradient.amax();
        if !d.value.is_finite() || !residual.is_finite() {
            return Err(Error::UnboundedDual { residual });
        }
        // A rank-deficient Hessian means gamma is not identified, even when
        // the constraints already hold. At gamma = 0 the Hessian is the
        // weighted auxiliary second-moment matrix itself.
        let inverse = spd_inverse(&d.hessian).map_err(|_| {
            if iterations == 0 {
                Error::SingularAuxiliary
            } else {
                Error::SingularSystem
            }
        })?;
        let step = -(&inverse * &d.gradient);
        if residual <= tol {
            // One more full step brings gamma to rounding accuracy.
            let polished = &gamma + &step;
            let d2 = dual(dataset, &polished);
            if d2.gradient.amax() <= residual && d2.value.is_finite() {
                gamma = polished;
            }
            break;
        }
        if iterations >= max_iter {
            return Err(Error::NoConvergence {
                iterations,
                residual,
            });
        }
        let slope = d.gradient.dot(&step);
        let mut scale = 1.0;
        let mut accepted = None;
        for halving in 0..MAX_HALVINGS {
            let trial = &gamma + &step * scale;
            let value = dual_value(dataset, &trial);
            // Near the optimum the Armijo decrease is below the rounding
            // error of the dual, so a full step that shrinks the gradient
            // is accepted as well.
            let gradient_drop = halving == 0
                && value.is_finite()
                && dual(dataset, &trial).gradient.amax() < residual;
            if gradient_drop || (value.is_finite() && value <= d.value + ARMIJO * scale * slope) {
                accepted = Some(trial);
                break;
            }
            scale *= SHRINK;
        }
        let Some(next) = accepted else {
            // No decrease possible: the iterate is a minimiser up to rounding.
            let weights = calibrated_weights(gamma.as_slice(), dataset);
            let res = max_abs(&constraint_residual(dataset, &weights));
            if res <= tol {
                break;
            }
            return Err(Error::NoConvergence {
                iterations,
                residual: res,
            });
        };
        gamma = next;
        iterations += 1;
        if gamma.amax() * v_scale > MAX_EXPONENT {
            let weights = calibrated_weights(gamma.as_slice(), dataset);
            return Err(Error::UnboundedDual {
                residual: max_abs(&constraint_residual(dataset, &weights)),
            });
        }
    }

    let weights = calibrated_weights(gamma.as_slice(), dataset);
    let constraint_residual = constraint_residual(dataset, &weights);
    let converged = max_abs(&constraint_residual) <= tol;
    log::debug!("calibration converged in {iterations} iterations");
    Ok(CalibrationSolution {
        gamma: gamma.iter().copied().collect(),
        deviance: total_deviance(dataset, &weights),
        weights,
        constraint_residual,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SubjectRecord;

    fn record(t: f64, selected: bool, pi: f64, aux: Vec<f64>) -> SubjectRecord {
        SubjectRecord {
            time: t,
            event: false,
            covariates: vec![if selected { Some(t) } else { None }],
            auxiliary: aux,
            selected,
            sampling_prob: pi,
        }
    }

    #[test]
    fn deviance_values() {
        assert_eq!(poisson_deviance(2.0, 2.0), 0.0);
        assert_eq!(poisson_deviance(0.0, 1.0), 1.0);
        let expected = 1.0 - 2f64.ln();
        assert!((poisson_deviance(1.0, 2.0) - expected).abs() < 1e-15);
        assert!((expected - 0.30685).abs() < 1e-5);
    }

    #[test]
    fn weights_by_formula() {
        let ds = Dataset::new(
            vec![
                record(1.0, true, 0.5, vec![1.0]),
                record(2.0, false, 0.5, vec![1.0]),
            ],
            2.0,
        )
        .unwrap();
        assert_eq!(calibrated_weights(&[0.0], &ds), vec![2.0, 0.0]);
        let w = calibrated_weights(&[2f64.ln()], &ds);
        assert!((w[0] - 1.0).abs() < 1e-15);
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn complete_sample_gives_zero_gamma() {
        let ds = Dataset::new(
            (1..=6)
                .map(|i| record(i as f64, true, 1.0, vec![1.0, i as f64 * 0.3]))
                .collect(),
            6.0,
        )
        .unwrap();
        let sol = solve_gamma(&ds, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER).unwrap();
        assert!(sol.gamma.iter().all(|g| g.abs() <= DEFAULT_TOLERANCE));
        assert!(sol.weights.iter().all(|&w| w == 1.0));
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn intercept_only_closed_form() {
        let ds = Dataset::new(
            vec![
                record(1.0, true, 0.5, vec![1.0]),
                record(2.0, false, 0.5, vec![1.0]),
                record(3.0, true, 0.25, vec![1.0]),
                record(4.0, false, 0.25, vec![1.0]),
                record(5.0, true, 0.8, vec![1.0]),
            ],
            5.0,
        )
        .unwrap();
        let sol = solve_gamma(&ds, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER).unwrap();
        let total: f64 = 2.0 + 4.0 + 1.25;
        let expected = (total / 5.0).ln();
        assert!((sol.gamma[0] - expected).abs() < 1e-12);
        let sum_w: f64 = sol.weights.iter().sum();
        assert!((sum_w - 5.0).abs() < 1e-10);
    }

    #[test]
    fn singular_auxiliary_design() {
        let ds = Dataset::new(
            (1..=4)
                .map(|i| record(i as f64, i % 2 == 0, 0.5, vec![1.0, 2.0]))
                .collect(),
            4.0,
        )
        .unwrap();
        assert!(matches!(
            solve_gamma(&ds, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER),
            Err(Error::SingularAuxiliary)
        ));
    }

    #[test]
    fn infeasible_totals_are_unbounded() {
        let ds = Dataset::new(
            vec![
                record(1.0, true, 0.5, vec![1.0]),
                record(2.0, false, 0.5, vec![-3.0]),
                record(3.0, true, 0.5, vec![0.5]),
            ],
            3.0,
        )
        .unwrap();
        assert!(matches!(
            solve_gamma(&ds, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER),
            Err(Error::UnboundedDual { .. })
        ));
    }

    #[test]
    fn missing_auxiliaries() {
        let recs = vec![SubjectRecord::complete(1.0, false, vec![1.0])];
        let ds = Dataset::new(recs, 1.0).unwrap();
        assert!(matches!(
            solve_gamma(&ds, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER),
            Err(Error::SchemeDataMismatch(_))
        ));
    }
}
