//! Influence functions and sandwich variances.
//!
//! For each target the estimator satisfies
//! `estimate - target ~ (1/N) sum_i w_i phi_i`, where `phi_i` is an
//! integral against the subject's residual process
//! `dM_i = dN_i - Y_i {dLambda + Z_i' theta dt}`:
//!
//! * `theta`:       `phi_i = A^{-1} int (Z_i - zbar) dM_i`
//! * `Lambda(s)`:   `phi_i = int_0^s dM_i / s0 - D(s)' phi_i^theta`
//! * `Lambda(s|z)`: as `Lambda(s)` with `D(s)` replaced by `D(s) - z s`
//!
//! with `D(s) = int_0^s zbar dt`. Rows are signed so that they average to
//! zero at the fit under the scheme weights; every variance below is a
//! quadratic form, so the sign convention does not affect it.
//!
//! The robust variance of `sqrt(N)(estimate - target)` is
//!
//! * random sampling: `(1/N) sum phi phi'`
//! * IPW:             `(1/N) sum (R/pi^2) phi phi'`
//! * calibrated:      `(1/N) sum (R/pi) phi phi'
//!                     + (1/N) sum (R/pi)((1-pi)/pi) (phi - Pi)(phi - Pi)'`
//!
//! where `Pi_i = C M^{-1} v_i` projects on the auxiliaries with
//! `C = (1/N) sum (R/pi) phi v'` and `M = (1/N) sum_all v v'`. The
//! model-based variance swaps the first term for the compensator form
//! that holds when the additive hazards model is true.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, WeightScheme};
use crate::error::{Error, Result};
use crate::estimators::FitResult;
use crate::linalg::{min_eigenvalue, spd_inverse};
use crate::risk::RiskGrid;
use crate::step::{Continuity, StepFunction};

/// Estimand whose influence rows are computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Theta,
    Lambda { s: f64 },
    Pred { s: f64, z: Vec<f64> },
}

impl Target {
    pub fn label(&self) -> String {
        match self {
            Target::Theta => "theta".into(),
            Target::Lambda { s } => format!("lambda({s})"),
            Target::Pred { s, z } => {
                let z: Vec<String> = z.iter().map(|v| v.to_string()).collect();
                format!("lambda({s}|{})", z.join(","))
            }
        }
    }
}

/// Per-subject influence rows (`N x d`). Rows of unselected subjects are
/// zero: their covariates are not observed and their weight is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceRows {
    pub target: Target,
    pub rows: DMatrix<f64>,
}

impl InfluenceRows {
    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// `(1/N) sum_i w_i phi_i`.
    pub fn weighted_mean(&self, weights: &[f64]) -> DVector<f64> {
        let n = self.rows.nrows();
        let mut mean = DVector::zeros(self.dim());
        for i in 0..n {
            if weights[i] != 0.0 {
                mean += self.rows.row(i).transpose() * (weights[i] / n as f64);
            }
        }
        mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    Robust,
    ModelBased,
}

/// Estimated asymptotic variance of `sqrt(N)(estimate - target)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    pub kind: VarianceKind,
    pub scheme: &'static str,
    pub matrix: DMatrix<f64>,
    /// Variance with complete data on the whole cohort.
    pub first_term: DMatrix<f64>,
    /// Extra variance from observing covariates only in phase II.
    pub penalty: DMatrix<f64>,
    pub n: usize,
}

impl VarianceEstimate {
    /// Variance of the estimator itself, `matrix / N`.
    pub fn estimator_variance(&self) -> DMatrix<f64> {
        &self.matrix / self.n as f64
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        let v = self.estimator_variance();
        (0..v.nrows()).map(|k| v[(k, k)].max(0.0).sqrt()).collect()
    }

    /// True when all eigenvalues are at least `-1e-10 * trace`.
    pub fn is_psd(&self) -> bool {
        let tr = self.matrix.trace().abs().max(f64::MIN_POSITIVE);
        min_eigenvalue(&self.matrix) >= -1e-10 * tr
    }
}

/// Prefix sums shared by the row computations.
struct RowPrefixes {
    jumps: Vec<f64>,
    jump_zbar: Vec<Vec<f64>>,
    len: crate::risk::Prefix,
    len_cbar: crate::risk::Prefix,
    len_zbar: Vec<crate::risk::Prefix>,
    len_zbar_cbar: Vec<crate::risk::Prefix>,
}

fn cbar(grid: &RiskGrid, theta: &DVector<f64>, k: usize) -> f64 {
    grid.zbar_at(k).iter().zip(theta.iter()).map(|(a, b)| a * b).sum()
}

fn jump(grid: &RiskGrid, k: usize) -> f64 {
    grid.dn[k] / grid.s0[k]
}

fn row_prefixes(grid: &RiskGrid, theta: &DVector<f64>) -> RowPrefixes {
    let p = grid.p;
    RowPrefixes {
        jumps: grid.point_prefix(|k| jump(grid, k)),
        jump_zbar: (0..p)
            .map(|a| grid.point_prefix(|k| jump(grid, k) * grid.zbar_at(k)[a]))
            .collect(),
        len: grid.prefix(|_| 1.0),
        len_cbar: grid.prefix(|k| cbar(grid, theta, k)),
        len_zbar: (0..p).map(|a| grid.prefix(|k| grid.zbar_at(k)[a])).collect(),
        len_zbar_cbar: (0..p)
            .map(|a| grid.prefix(|k| grid.zbar_at(k)[a] * cbar(grid, theta, k)))
            .collect(),
    }
}

/// `int_0^{T_i ^ tau} (Z_i - zbar) dM_i` for every subject, `N x p`.
fn score_residuals(grid: &RiskGrid, theta: &DVector<f64>) -> DMatrix<f64> {
    let p = grid.p;
    let pre = row_prefixes(grid, theta);
    let mut out = DMatrix::zeros(grid.n, p);
    for i in 0..grid.n {
        if grid.weights[i] == 0.0 {
            continue;
        }
        let k = grid.index[i];
        let z = grid.z_of(i);
        let c: f64 = z.iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
        let zb = grid.zbar_at(k);
        let cj = pre.jumps[k + 1];
        let l = pre.len.upto_index(k);
        let e = pre.len_cbar.upto_index(k);
        for a in 0..p {
            let event = if grid.event[i] { z[a] - zb[a] } else { 0.0 };
            let jump_part = z[a] * cj - pre.jump_zbar[a][k + 1];
            let drift_part = z[a] * c * l - z[a] * e - pre.len_zbar[a].upto_index(k) * c
                + pre.len_zbar_cbar[a].upto_index(k);
            out[(i, a)] = event - jump_part - drift_part;
        }
    }
    out
}

fn theta_rows(fit: &FitResult) -> DMatrix<f64> {
    let u = score_residuals(&fit.grid, &fit.theta);
    u * fit.a_inverse.transpose()
}

/// `D(s) = int_0^s zbar dt`.
pub(crate) fn d_vector(grid: &RiskGrid, s: f64) -> DVector<f64> {
    DVector::from_iterator(grid.p, (0..grid.p).map(|a| grid.prefix(|k| grid.zbar_at(k)[a]).at(grid, s)))
}

/// `int_0^{s ^ T_i} dM_i / s0` for every subject.
fn hazard_residuals(grid: &RiskGrid, theta: &DVector<f64>, s: f64) -> DVector<f64> {
    let jump_over_s0 = grid.point_prefix(|k| jump(grid, k) / grid.s0[k]);
    let inv_s0 = grid.prefix(|k| 1.0 / grid.s0[k]);
    let cbar_s0 = grid.prefix(|k| cbar(grid, theta, k) / grid.s0[k]);
    let mut out = DVector::zeros(grid.n);
    for i in 0..grid.n {
        if grid.weights[i] == 0.0 {
            continue;
        }
        let k = grid.index[i];
        let ti = grid.times[k];
        let upto = ti.min(s);
        let c: f64 = grid.z_of(i).iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
        let event = if grid.event[i] && ti <= s {
            1.0 / grid.s0[k]
        } else {
            0.0
        };
        let m = grid.count_upto(upto);
        out[i] = event - jump_over_s0[m] - c * inv_s0.at(grid, upto) + cbar_s0.at(grid, upto);
    }
    out
}

fn check_time(fit: &FitResult, s: f64) -> Result<()> {
    if s >= 0.0 && s <= fit.grid.tau {
        Ok(())
    } else {
        Err(Error::DomainError(format!("s = {s} outside [0, {}]", fit.grid.tau)))
    }
}

fn check_fit(dataset: &Dataset, scheme: &WeightScheme, fit: &FitResult) -> Result<()> {
    if fit.grid.n != dataset.len() || &fit.scheme != scheme {
        return Err(Error::SchemeDataMismatch(
            "fit was computed on a different dataset or scheme".into(),
        ));
    }
    Ok(())
}

/// Influence rows for `theta` (`N x p`).
pub fn influence_theta(dataset: &Dataset, scheme: &WeightScheme, fit: &FitResult) -> Result<InfluenceRows> {
    check_fit(dataset, scheme, fit)?;
    Ok(InfluenceRows {
        target: Target::Theta,
        rows: theta_rows(fit),
    })
}

fn cumhaz_rows(fit: &FitResult, theta_rows: &DMatrix<f64>, s: f64, z: Option<&[f64]>) -> DMatrix<f64> {
    let grid = &fit.grid;
    let mut shift = d_vector(grid, s);
    if let Some(z) = z {
        for (d, zk) in shift.iter_mut().zip(z) {
            *d -= zk * s;
        }
    }
    let base = hazard_residuals(grid, &fit.theta, s);
    let rows = base - theta_rows * shift;
    DMatrix::from_column_slice(grid.n, 1, rows.as_slice())
}

/// Influence rows for `Lambda(s)` (`N x 1`).
pub fn influence_lambda(
    dataset: &Dataset,
    scheme: &WeightScheme,
    fit: &FitResult,
    s: f64,
) -> Result<InfluenceRows> {
    check_fit(dataset, scheme, fit)?;
    check_time(fit, s)?;
    Ok(InfluenceRows {
        target: Target::Lambda { s },
        rows: cumhaz_rows(fit, &theta_rows(fit), s, None),
    })
}

/// Influence rows for `Lambda(s | z)` (`N x 1`).
pub fn influence_pred(
    dataset: &Dataset,
    scheme: &WeightScheme,
    fit: &FitResult,
    s: f64,
    z: &[f64],
) -> Result<InfluenceRows> {
    check_fit(dataset, scheme, fit)?;
    check_time(fit, s)?;
    if z.len() != fit.theta.len() {
        return Err(Error::DomainError(format!("z must have dimension {}", fit.theta.len())));
    }
    Ok(InfluenceRows {
        target: Target::Pred { s, z: z.to_vec() },
        rows: cumhaz_rows(fit, &theta_rows(fit), s, Some(z)),
    })
}

/// Influence rows for several targets, sharing the `theta` rows.
pub fn influence_rows(fit: &FitResult, targets: &[Target]) -> Result<Vec<InfluenceRows>> {
    let theta = theta_rows(fit);
    targets
        .iter()
        .map(|t| {
            let rows = match t {
                Target::Theta => theta.clone(),
                Target::Lambda { s } => {
                    check_time(fit, *s)?;
                    cumhaz_rows(fit, &theta, *s, None)
                }
                Target::Pred { s, z } => {
                    check_time(fit, *s)?;
                    cumhaz_rows(fit, &theta, *s, Some(z))
                }
            };
            Ok(InfluenceRows {
                target: t.clone(),
                rows,
            })
        })
        .collect()
}

fn weighted_outer(rows: &DMatrix<f64>, weights: impl Fn(usize) -> f64, n: usize) -> DMatrix<f64> {
    let d = rows.ncols();
    let mut out = DMatrix::zeros(d, d);
    for i in 0..rows.nrows() {
        let w = weights(i);
        if w == 0.0 {
            continue;
        }
        let r = rows.row(i);
        for a in 0..d {
            for b in 0..d {
                out[(a, b)] += w * r[a] * r[b];
            }
        }
    }
    out / n as f64
}

/// How the auxiliary projection in the calibrated penalty is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMoments {
    /// `C` from IPW-weighted phase-II moments and `M` from the full cohort.
    Design,
    /// Both moments weighted by the penalty weights `(R/pi)((1-pi)/pi)`,
    /// making the projection a weighted least-squares fit of the same
    /// quadratic form the penalty measures.
    PenaltyWeighted,
}

/// Design-based penalty terms for a set of rows.
pub fn penalty_term(
    rows: &InfluenceRows,
    dataset: &Dataset,
    scheme: &WeightScheme,
    moments: ProjectionMoments,
) -> Result<DMatrix<f64>> {
    let n = dataset.len();
    let recs = dataset.records();
    let ipw = |i: usize| if recs[i].selected { 1.0 / recs[i].sampling_prob } else { 0.0 };
    let pen = |i: usize| ipw(i) * (1.0 - recs[i].sampling_prob) / recs[i].sampling_prob;
    match scheme {
        WeightScheme::Unit => Ok(DMatrix::zeros(rows.dim(), rows.dim())),
        WeightScheme::Ipw => Ok(weighted_outer(&rows.rows, pen, n)),
        WeightScheme::Calibrated { .. } => {
            let q = dataset.q();
            let d = rows.dim();
            let mut c = DMatrix::zeros(d, q);
            let mut m = DMatrix::zeros(q, q);
            for (i, r) in recs.iter().enumerate() {
                let v = DVector::from_column_slice(&r.auxiliary);
                let (wc, wm) = match moments {
                    ProjectionMoments::Design => (ipw(i), 1.0),
                    ProjectionMoments::PenaltyWeighted => (pen(i), pen(i)),
                };
                if wm != 0.0 {
                    m += &v * v.transpose() * wm;
                }
                if wc != 0.0 {
                    c += rows.rows.row(i).transpose() * v.transpose() * wc;
                }
            }
            c /= n as f64;
            m /= n as f64;
            let m_inv = match moments {
                ProjectionMoments::Design => spd_inverse(&m).map_err(|_| Error::SingularAuxiliary)?,
                // Least-squares fit on whatever the penalty weights support.
                ProjectionMoments::PenaltyWeighted => m
                    .clone()
                    .pseudo_inverse(1e-12 * m.amax())
                    .map_err(|_| Error::SingularAuxiliary)?,
            };
            let coef = &c * m_inv;
            let mut resid = rows.rows.clone();
            for (i, r) in recs.iter().enumerate() {
                if pen(i) == 0.0 {
                    continue;
                }
                let v = DVector::from_column_slice(&r.auxiliary);
                let proj = &coef * v;
                for a in 0..d {
                    resid[(i, a)] -= proj[a];
                }
            }
            Ok(weighted_outer(&resid, pen, n))
        }
    }
}

/// Robust (sandwich) variance under the scheme.
pub fn robust_variance(rows: &InfluenceRows, dataset: &Dataset, scheme: &WeightScheme) -> Result<VarianceEstimate> {
    let n = dataset.len();
    let recs = dataset.records();
    let ipw = |i: usize| if recs[i].selected { 1.0 / recs[i].sampling_prob } else { 0.0 };
    let first_term = match scheme {
        WeightScheme::Unit => weighted_outer(&rows.rows, |_| 1.0, n),
        _ => weighted_outer(&rows.rows, ipw, n),
    };
    let penalty = penalty_term(rows, dataset, scheme, ProjectionMoments::Design)?;
    let matrix = match scheme {
        WeightScheme::Unit => first_term.clone(),
        WeightScheme::Ipw => weighted_outer(&rows.rows, |i| ipw(i) / recs[i].sampling_prob, n),
        WeightScheme::Calibrated { .. } => &first_term + &penalty,
    };
    Ok(VarianceEstimate {
        kind: VarianceKind::Robust,
        scheme: scheme.label(),
        matrix,
        first_term,
        penalty,
        n,
    })
}

/// Model-based first term for the target: the compensator quadratic form.
fn model_first_term(fit: &FitResult, target: &Target) -> DMatrix<f64> {
    let grid = &fit.grid;
    match target {
        Target::Theta => &fit.a_inverse * &fit.b_matrix * fit.a_inverse.transpose(),
        Target::Lambda { s } | Target::Pred { s, .. } => {
            let s = *s;
            let mut shift = d_vector(grid, s);
            if let Target::Pred { z, .. } = target {
                for (d, zk) in shift.iter_mut().zip(z) {
                    *d -= zk * s;
                }
            }
            let u = &fit.a_inverse * shift;
            let m = grid.count_upto(s);
            let events: f64 = (0..m).map(|k| grid.dn[k] / (grid.s0[k] * grid.s0[k])).sum();
            // int_0^s u' V(t) theta / s0 dt with V the at-risk covariance sum.
            let p = grid.p;
            let cross = grid
                .prefix(|k| {
                    let s0 = grid.s0[k];
                    let mut acc = 0.0;
                    for a in 0..p {
                        for b in 0..p {
                            let v = grid.s2[(k * p + a) * p + b] - grid.s1[k * p + a] * grid.s1[k * p + b] / s0;
                            acc += u[a] * v * fit.theta[b];
                        }
                    }
                    acc / s0
                })
                .at(grid, s);
            let quad = (u.transpose() * &fit.b_matrix * &u)[(0, 0)];
            DMatrix::from_element(1, 1, events - 2.0 * cross + quad)
        }
    }
}

/// Model-based variance: compensator first term plus the design penalty.
pub fn model_based_variance(
    dataset: &Dataset,
    scheme: &WeightScheme,
    fit: &FitResult,
    rows: &InfluenceRows,
) -> Result<VarianceEstimate> {
    check_fit(dataset, scheme, fit)?;
    let first_term = model_first_term(fit, &rows.target);
    let penalty = penalty_term(rows, dataset, scheme, ProjectionMoments::Design)?;
    Ok(VarianceEstimate {
        kind: VarianceKind::ModelBased,
        scheme: scheme.label(),
        matrix: &first_term + &penalty,
        first_term,
        penalty,
        n: dataset.len(),
    })
}

/// Perturbation direction `(d theta, d Lambda)`; `d Lambda` is a cumulative
/// pure-jump function whose jumps (including its value at 0) form the
/// measure.
#[derive(Debug, Clone)]
pub struct Direction {
    pub theta: DVector<f64>,
    pub lambda: StepFunction,
}

/// Index `h = (h1, h2)` with `h2` a step function on `[0, tau]`.
#[derive(Debug, Clone)]
pub struct Index {
    pub h1: DVector<f64>,
    pub h2: StepFunction,
}

fn point_masses(f: &StepFunction) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let first = f.piece(0)[0];
    if first != 0.0 {
        out.push((0.0, first));
    }
    for (j, &t) in f.knots().iter().enumerate() {
        out.push((t, f.piece(j + 1)[0] - f.piece(j)[0]));
    }
    out
}

/// Exact `int_0^tau h(t) g_k dt` for a step function `h` against a grid
/// step rate `g_k`.
fn integrate_against_grid(grid: &RiskGrid, h: &StepFunction, rate: impl Fn(usize) -> f64) -> Result<f64> {
    let mut cuts: Vec<f64> = grid.times.iter().chain(h.knots()).copied().collect();
    cuts.push(0.0);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut acc = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        acc += (b - a) * h.eval_scalar(mid)? * rate(grid.interval_of(mid));
    }
    Ok(acc)
}

/// Applies the derivative of the estimating-equation map, with the
/// population measure replaced by the weighted empirical one:
///
/// ```text
/// - h1' P int Y Z Z' dt dtheta - h1' P int Z Y dLambda
/// - P int h2 Y Z' dt dtheta    - P int h2 Y dLambda
/// ```
pub fn frechet_apply(fit: &FitResult, direction: &Direction, h: &Index) -> Result<f64> {
    let grid = &fit.grid;
    let p = grid.p;
    let dtheta = &direction.theta;
    let mut total = 0.0;
    // Theta blocks.
    for a in 0..p {
        for b in 0..p {
            let s2 = grid.prefix(|k| grid.s2[(k * p + a) * p + b]).upto_index(grid.len() - 1);
            total -= h.h1[a] * s2 * dtheta[b];
        }
        let h2_s1 = integrate_against_grid(grid, &h.h2, |k| grid.s1[k * p + a])?;
        total -= h2_s1 * dtheta[a];
    }
    // Lambda blocks.
    for (t, mass) in point_masses(&direction.lambda) {
        let k = grid.interval_of(t);
        let s1_term: f64 = (0..p).map(|a| h.h1[a] * grid.s1[k * p + a]).sum();
        total -= s1_term * mass;
        total -= h.h2.eval_scalar(t)? * grid.s0[k] * mass;
    }
    Ok(total)
}

fn zbar_combination(grid: &RiskGrid, coef: &DVector<f64>, extra: impl Fn(usize) -> f64) -> Result<StepFunction> {
    let values: Vec<f64> = (0..grid.len())
        .map(|k| {
            let zb = grid.zbar_at(k);
            coef.iter().zip(zb).map(|(c, z)| c * z).sum::<f64>() + extra(k)
        })
        .collect();
    StepFunction::scalar(grid.tau, grid.times[..grid.len() - 1].to_vec(), values, Continuity::Left)
}

/// Index that extracts `h1' (theta_hat - theta)`:
/// `(-A^{-1} h1, (A^{-1} h1)' zbar(t))`.
pub fn theta_index(fit: &FitResult, h1: &DVector<f64>) -> Result<Index> {
    let v = &fit.a_inverse * h1;
    Ok(Index {
        h1: -&v,
        h2: zbar_combination(&fit.grid, &v, |_| 0.0)?,
    })
}

/// Index that extracts `Lambda(s|z) - Lambda_0(s|z)`; `z = 0` gives the
/// baseline `Lambda(s)` index.
pub fn cumhaz_index(fit: &FitResult, s: f64, z: &[f64]) -> Result<Index> {
    check_time(fit, s)?;
    let grid = &fit.grid;
    let mut shift = d_vector(grid, s);
    for (d, zk) in shift.iter_mut().zip(z) {
        *d -= zk * s;
    }
    let v = &fit.a_inverse * shift;
    // -1(t <= s)/s0(t) on the grid intervals; split the interval holding s.
    let mut knots = Vec::new();
    let mut values = Vec::new();
    for k in 0..grid.len() {
        let start = if k == 0 { 0.0 } else { grid.times[k - 1] };
        let end = grid.times[k];
        let zb: f64 = v.iter().zip(grid.zbar_at(k)).map(|(a, b)| a * b).sum();
        let inside = -1.0 / grid.s0[k] - zb;
        let outside = -zb;
        if s >= end {
            values.push(inside);
        } else if s <= start {
            values.push(outside);
        } else {
            values.push(inside);
            knots.push(s);
            values.push(outside);
        }
        if k + 1 < grid.len() {
            knots.push(end);
        }
    }
    Ok(Index {
        h1: v,
        h2: StepFunction::scalar(grid.tau, knots, values, Continuity::Left)?,
    })
}
