//! Closed-form additive hazards estimators under any weighting scheme.
//!
//! With weighted at-risk means `s0(t)`, `zbar(t)` and event mass `dN(t)`:
//!
//! ```text
//! A      = (1/N) sum_i w_i int_0^{T_i ^ tau} (Z_i - zbar)(Z_i - zbar)' dt
//! b      = (1/N) sum_i w_i Delta_i (Z_i - zbar(T_i))
//! theta  = A^{-1} b
//! Lambda(s) = sum_{t_k <= s} dN(t_k) / s0(t_k) - int_0^s zbar' theta dt
//! ```
//!
//! `Lambda` is not forced to be monotone: when the drift term dominates it
//! can decrease, and the variance formulas are for this unprojected form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, WeightScheme};
use crate::error::{Error, Result};
use crate::linalg::spd_inverse;
use crate::risk::RiskGrid;
use crate::step::{Continuity, StepFunction};

/// Estimated cumulative baseline hazard: a Nelson–Aalen-type jump part minus
/// an absolutely continuous drift `int_0^s zbar' theta dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeHazard {
    /// Right-continuous cumulative sum of the jumps.
    pub jumps: StepFunction,
    /// Left-continuous rate `zbar(t)' theta`.
    pub drift_rate: StepFunction,
}

impl CumulativeHazard {
    pub fn eval(&self, s: f64) -> Result<f64> {
        Ok(self.jumps.eval_scalar(s)? - self.drift_rate.integrate_scalar(0.0, s)?)
    }

    pub fn tau(&self) -> f64 {
        self.jumps.tau()
    }

    /// Event times and jump sizes.
    pub fn jump_sizes(&self) -> Vec<(f64, f64)> {
        let mut prev = self.jumps.piece(0)[0];
        self.jumps
            .knots()
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let v = self.jumps.piece(j + 1)[0];
                let jump = v - prev;
                prev = v;
                (t, jump)
            })
            .collect()
    }

    /// Values at the given times.
    pub fn values_at(&self, times: &[f64]) -> Result<Vec<f64>> {
        times.iter().map(|&t| self.eval(t)).collect()
    }
}

/// Point estimates and the matrices needed for inference.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: DVector<f64>,
    pub lambda: CumulativeHazard,
    pub a_matrix: DMatrix<f64>,
    pub a_inverse: DMatrix<f64>,
    pub b_matrix: DMatrix<f64>,
    pub scheme: WeightScheme,
    pub(crate) grid: RiskGrid,
}

impl FitResult {
    pub fn grid(&self) -> &RiskGrid {
        &self.grid
    }

    /// `Lambda(s | z) = Lambda(s) + z' theta s`.
    pub fn predict(&self, z: &[f64], s: f64) -> Result<f64> {
        predict_cumhaz(self, z, s)
    }
}

pub(crate) struct ThetaParts {
    pub theta: DVector<f64>,
    pub a: DMatrix<f64>,
    pub a_inverse: DMatrix<f64>,
}

pub(crate) fn theta_from_grid(grid: &RiskGrid) -> Result<ThetaParts> {
    let p = grid.p;
    let mut a = DMatrix::zeros(p, p);
    for k in 0..grid.len() {
        let len = grid.len_at(k);
        if len == 0.0 {
            continue;
        }
        let s0 = grid.s0[k];
        for r in 0..p {
            for c in 0..p {
                let centred = grid.s2[(k * p + r) * p + c] - grid.s1[k * p + r] * grid.s1[k * p + c] / s0;
                a[(r, c)] += len * centred;
            }
        }
    }
    let mut b = DVector::zeros(p);
    let inv_n = 1.0 / grid.n as f64;
    for i in 0..grid.n {
        let w = grid.weights[i];
        if !grid.event[i] || w == 0.0 {
            continue;
        }
        let zb = grid.zbar_at(grid.index[i]);
        for (r, (zi, zb)) in grid.z_of(i).iter().zip(zb).enumerate() {
            b[r] += w * (zi - zb) * inv_n;
        }
    }
    let a_inverse = spd_inverse(&a).map_err(|condition| Error::SingularA { condition })?;
    let theta = &a_inverse * b;
    Ok(ThetaParts {
        theta,
        a,
        a_inverse,
    })
}

pub(crate) fn lambda_from_grid(grid: &RiskGrid, theta: &DVector<f64>) -> CumulativeHazard {
    let p = grid.p;
    let mut knots = Vec::new();
    let mut values = vec![0.0];
    let mut acc = 0.0;
    for k in 0..grid.len() {
        if grid.dn[k] > 0.0 {
            acc += grid.dn[k] / grid.s0[k];
            knots.push(grid.times[k]);
            values.push(acc);
        }
    }
    let jumps = StepFunction::scalar(grid.tau, knots, values, Continuity::Right)
        .expect("event times are strictly increasing");
    let rates: Vec<f64> = (0..grid.len())
        .map(|k| (0..p).map(|a| grid.zbar[k * p + a] * theta[a]).sum())
        .collect();
    let drift_rate = StepFunction::scalar(
        grid.tau,
        grid.times[..grid.len() - 1].to_vec(),
        rates,
        Continuity::Left,
    )
    .expect("grid times are strictly increasing");
    CumulativeHazard { jumps, drift_rate }
}

/// `B = (1/N) sum_i w_i int (Z_i - zbar)^{x2} Y_i {dLambda + Z_i' theta dt}`,
/// assembled from at-risk moment sums.
pub(crate) fn b_from_grid(grid: &RiskGrid, theta: &DVector<f64>) -> DMatrix<f64> {
    let p = grid.p;
    let pp = p * p;
    // Moments weighted by c_i = Z_i' theta: [u0, u1 (p), u2 (p x p)].
    let dim = 1 + p + pp;
    let sums = grid.at_risk_sums(dim, |i, out| {
        let z = grid.z_of(i);
        let c: f64 = z.iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
        out[0] = c;
        for a in 0..p {
            out[1 + a] = z[a] * c;
            for b in 0..p {
                out[1 + p + a * p + b] = z[a] * z[b] * c;
            }
        }
    });
    let mut b_mat = DMatrix::zeros(p, p);
    for k in 0..grid.len() {
        let s0 = grid.s0[k];
        let zb = grid.zbar_at(k);
        let cbar: f64 = zb.iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
        let jump = grid.dn[k] / s0;
        let len = grid.len_at(k);
        let u = &sums[k * dim..(k + 1) * dim];
        for r in 0..p {
            for c in 0..p {
                let v = grid.s2[k * pp + r * p + c] - grid.s1[k * p + r] * grid.s1[k * p + c] / s0;
                let w = u[1 + p + r * p + c] - u[1 + r] * zb[c] - zb[r] * u[1 + c]
                    + zb[r] * zb[c] * u[0]
                    - cbar * v;
                b_mat[(r, c)] += jump * v + len * w;
            }
        }
    }
    b_mat
}

/// `theta` and `A` for a dataset and scheme.
pub fn fit_theta(dataset: &Dataset, scheme: &WeightScheme) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let grid = RiskGrid::for_scheme(dataset, scheme)?;
    let parts = theta_from_grid(&grid)?;
    Ok((parts.theta, parts.a))
}

/// Cumulative baseline hazard for a given `theta`.
pub fn fit_lambda(
    dataset: &Dataset,
    scheme: &WeightScheme,
    theta: &DVector<f64>,
) -> Result<CumulativeHazard> {
    let grid = RiskGrid::for_scheme(dataset, scheme)?;
    if theta.len() != grid.p {
        return Err(Error::DomainError(format!(
            "theta has dimension {}, expected {}",
            theta.len(),
            grid.p
        )));
    }
    Ok(lambda_from_grid(&grid, theta))
}

/// Full fit: `theta`, `Lambda`, `A` and `B`.
pub fn fit(dataset: &Dataset, scheme: &WeightScheme) -> Result<FitResult> {
    let grid = RiskGrid::for_scheme(dataset, scheme)?;
    fit_on_grid(grid, scheme.clone())
}

pub(crate) fn fit_on_grid(grid: RiskGrid, scheme: WeightScheme) -> Result<FitResult> {
    let parts = theta_from_grid(&grid)?;
    let lambda = lambda_from_grid(&grid, &parts.theta);
    let b_matrix = b_from_grid(&grid, &parts.theta);
    Ok(FitResult {
        theta: parts.theta,
        lambda,
        a_matrix: parts.a,
        a_inverse: parts.a_inverse,
        b_matrix,
        scheme,
        grid,
    })
}

/// `B` for a fit on the same dataset and scheme.
pub fn compute_b(dataset: &Dataset, scheme: &WeightScheme, fit: &FitResult) -> Result<DMatrix<f64>> {
    let grid = RiskGrid::for_scheme(dataset, scheme)?;
    Ok(b_from_grid(&grid, &fit.theta))
}

/// Predicted cumulative hazard `Lambda(s) + z' theta s`.
pub fn predict_cumhaz(fit: &FitResult, z: &[f64], s: f64) -> Result<f64> {
    if z.len() != fit.theta.len() {
        return Err(Error::DomainError(format!(
            "z has dimension {}, expected {}",
            z.len(),
            fit.theta.len()
        )));
    }
    let base = fit.lambda.eval(s)?;
    let lin: f64 = z.iter().zip(fit.theta.iter()).map(|(a, b)| a * b).sum();
    Ok(base + lin * s)
}
