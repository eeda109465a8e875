//! Brute-force solver of the estimating equations on a finite index grid.
//!
//! Unknowns are `theta` and the jumps of `Lambda` at the distinct event
//! times; the absolutely continuous part `-int zbar' theta dt` is rebuilt
//! from `theta` by direct summation. Equations are indexed by the unit
//! vectors (`h1`) and by the indicators `1(t <= s_k)` (`h2`). None of the
//! closed-form machinery is used here, so agreement with it is a real check.

use nalgebra::{DMatrix, DVector};

use crate::data::{validate, Dataset, WeightScheme};
use crate::error::{Error, Result};

const POLISH_STEPS: usize = 5;

/// Default cap on the number of unknowns `p + m`.
pub const DEFAULT_CAP: usize = 200;

/// The finite index set: `p` unit vectors and `m` event-time indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexGrid {
    pub p: usize,
    /// Distinct event times `s_1 < ... < s_m <= tau`.
    pub event_times: Vec<f64>,
}

/// One element of the index grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexElement {
    /// `h1 = e_j`, `h2 = 0`.
    Unit(usize),
    /// `h1 = 0`, `h2 = 1(t <= s_k)`.
    Indicator(usize),
}

impl IndexGrid {
    pub fn new(dataset: &Dataset, scheme: &WeightScheme) -> Self {
        let w = scheme.weights(dataset);
        let mut event_times: Vec<f64> = dataset
            .records()
            .iter()
            .zip(&w)
            .filter(|(r, &w)| w != 0.0 && r.event && r.time <= dataset.tau())
            .map(|(r, _)| r.time)
            .collect();
        event_times.sort_by(f64::total_cmp);
        event_times.dedup();
        IndexGrid {
            p: dataset.p(),
            event_times,
        }
    }

    pub fn m(&self) -> usize {
        self.event_times.len()
    }

    pub fn size(&self) -> usize {
        self.p + self.m()
    }

    pub fn elements(&self) -> Vec<IndexElement> {
        (0..self.p)
            .map(IndexElement::Unit)
            .chain((0..self.m()).map(IndexElement::Indicator))
            .collect()
    }
}

/// Observed subject data with weights, precomputed once per evaluation.
struct Subjects {
    n: usize,
    tau: f64,
    rows: Vec<(f64, bool, Vec<f64>, f64)>,
}

impl Subjects {
    fn new(dataset: &Dataset, scheme: &WeightScheme) -> Self {
        let w = scheme.weights(dataset);
        let tau = dataset.tau();
        let rows = dataset
            .records()
            .iter()
            .zip(w)
            .filter(|(_, w)| *w != 0.0)
            .map(|(r, w)| {
                let z = r.covariates.iter().map(|c| c.unwrap_or(0.0)).collect();
                (r.time.min(tau), r.event && r.time <= tau, z, w)
            })
            .collect();
        Subjects {
            n: dataset.len(),
            tau,
            rows,
        }
    }

    /// `int_0^u zbar(t)' theta dt` for each `u` in `upper`, with `zbar`
    /// summed directly at the midpoint of every elementary interval.
    fn drift(&self, theta: &[f64], upper: &[f64]) -> Vec<f64> {
        let mut cuts: Vec<f64> = self.rows.iter().map(|r| r.0).chain([0.0, self.tau]).collect();
        cuts.extend_from_slice(upper);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut pieces = Vec::with_capacity(cuts.len());
        for w in cuts.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let (mut num, mut den) = (0.0, 0.0);
            for (t, _, z, wi) in &self.rows {
                if *t >= mid {
                    den += wi;
                    num += wi * z.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            let rate = if den > 0.0 { num / den } else { 0.0 };
            pieces.push((w[0], w[1], rate));
        }
        upper
            .iter()
            .map(|&u| {
                pieces
                    .iter()
                    .map(|&(a, b, r)| (b.min(u) - a).max(0.0) * r)
                    .sum()
            })
            .collect()
    }
}

fn residual_vector(subjects: &Subjects, grid: &IndexGrid, theta: &[f64], jumps: &[f64]) -> Vec<f64> {
    let p = grid.p;
    let m = grid.m();
    let n = subjects.n as f64;
    let mut out = vec![0.0; p + m];
    let follow: Vec<f64> = subjects.rows.iter().map(|r| r.0).collect();
    let drift_i = subjects.drift(theta, &follow);
    let drift_s = subjects.drift(theta, &grid.event_times);
    for (i, (t, event, z, w)) in subjects.rows.iter().enumerate() {
        let zt: f64 = z.iter().zip(theta).map(|(a, b)| a * b).sum();
        let jump_mass: f64 = grid
            .event_times
            .iter()
            .zip(jumps)
            .filter(|(s, _)| *s <= t)
            .map(|(_, l)| l)
            .sum();
        // int_0^{T_i} dLambda + Z_i' theta dt.
        let compensator = jump_mass - drift_i[i] + zt * t;
        let dn = if *event { 1.0 } else { 0.0 };
        for j in 0..p {
            out[j] += w * z[j] * (dn - compensator);
        }
        for (k, &s) in grid.event_times.iter().enumerate() {
            let u = t.min(s);
            let jm: f64 = grid
                .event_times
                .iter()
                .zip(jumps)
                .filter(|(v, _)| **v <= u)
                .map(|(_, l)| l)
                .sum();
            let drift_u = if *t <= s { drift_i[i] } else { drift_s[k] };
            let dn_s = if *event && *t <= s { 1.0 } else { 0.0 };
            out[p + k] += w * (dn_s - (jm - drift_u + zt * u));
        }
    }
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Weighted empirical average of the estimating function at one index
/// element, with `Lambda` given by its jumps on `grid` and the drift
/// reconstructed from `theta`.
pub fn ee_residual(
    dataset: &Dataset,
    scheme: &WeightScheme,
    grid: &IndexGrid,
    theta: &[f64],
    lambda_jumps: &[f64],
    h: IndexElement,
) -> Result<f64> {
    validate(dataset, scheme)?;
    let all = ee_residuals(dataset, scheme, grid, theta, lambda_jumps)?;
    Ok(match h {
        IndexElement::Unit(j) => all[j],
        IndexElement::Indicator(k) => all[grid.p + k],
    })
}

/// Residuals of every equation in the grid (`h1` equations first).
pub fn ee_residuals(
    dataset: &Dataset,
    scheme: &WeightScheme,
    grid: &IndexGrid,
    theta: &[f64],
    lambda_jumps: &[f64],
) -> Result<Vec<f64>> {
    if theta.len() != grid.p || lambda_jumps.len() != grid.m() {
        return Err(Error::DomainError("parameter dimensions do not match the index grid".into()));
    }
    let subjects = Subjects::new(dataset, scheme);
    Ok(residual_vector(&subjects, grid, theta, lambda_jumps))
}

/// Newton root of the grid equations.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub grid: IndexGrid,
    pub theta: Vec<f64>,
    pub jumps: Vec<f64>,
    pub iterations: usize,
    pub max_residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    pub cap: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            cap: DEFAULT_CAP,
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

/// Solves the grid equations by Newton's method with a central-difference
/// Jacobian. `init = None` starts from zero.
pub fn solve_ee(
    dataset: &Dataset,
    scheme: &WeightScheme,
    init: Option<(&[f64], &[f64])>,
    options: OracleOptions,
) -> Result<OracleSolution> {
    validate(dataset, scheme)?;
    let grid = IndexGrid::new(dataset, scheme);
    let (p, d) = (grid.p, grid.size());
    if d > options.cap {
        return Err(Error::DomainError(format!(
            "oracle system has {d} unknowns, cap is {}",
            options.cap
        )));
    }
    let subjects = Subjects::new(dataset, scheme);
    let eval = |x: &DVector<f64>| DVector::from_vec(residual_vector(&subjects, &grid, &x.as_slice()[..p], &x.as_slice()[p..]));
    let mut x = match init {
        Some((t, j)) if t.len() == p && j.len() == grid.m() => {
            DVector::from_iterator(d, t.iter().chain(j).copied())
        }
        Some(_) => return Err(Error::DomainError("initial values do not match the index grid".into())),
        None => DVector::zeros(d),
    };
    let mut f = eval(&x);
    let mut iterations = 0;
    while f.amax() > options.tol {
        if iterations == options.max_iter {
            return Err(Error::NoConvergence {
                iterations,
                residual: f.amax(),
            });
        }
        let mut jac = DMatrix::zeros(d, d);
        for c in 0..d {
            let h = 1e-6 * (1.0 + x[c].abs());
            let mut up = x.clone();
            up[c] += h;
            let mut down = x.clone();
            down[c] -= h;
            jac.set_column(c, &((eval(&up) - eval(&down)) / (2.0 * h)));
        }
        let sv = jac.clone().singular_values();
        let (smax, smin) = (sv.max(), sv.min());
        // Differencing noise is about 1e-10 relative, so a smaller singular
        // value ratio cannot be told apart from exact singularity.
        if d > 0 && (smin <= 0.0 || smax / smin > 1e9) {
            return Err(Error::SingularJacobian);
        }
        let lu = jac.lu();
        x -= lu.solve(&f).ok_or(Error::SingularJacobian)?;
        f = eval(&x);
        iterations += 1;
        if f.amax() <= options.tol {
            // The residual tolerance is absolute; with a poorly scaled
            // system the root can still be off in the 8th digit, so keep
            // stepping while the residual shrinks.
            for _ in 0..POLISH_STEPS {
                let Some(step) = lu.solve(&f) else { break };
                let candidate = &x - step;
                let fc = eval(&candidate);
                if fc.amax() >= f.amax() {
                    break;
                }
                x = candidate;
                f = fc;
            }
            break;
        }
    }
    Ok(OracleSolution {
        theta: x.as_slice()[..p].to_vec(),
        jumps: x.as_slice()[p..].to_vec(),
        grid,
        iterations,
        max_residual: f.amax(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SubjectRecord;

    fn six() -> Dataset {
        let data = [
            (0.4, true, 1.0),
            (0.8, true, 0.0),
            (1.1, false, 2.0),
            (1.5, true, 1.0),
            (2.0, false, 0.5),
            (2.0, false, 1.5),
        ];
        Dataset::new(
            data.iter()
                .map(|&(t, d, z)| SubjectRecord::complete(t, d, vec![z]))
                .collect(),
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn no_events_zero_parameters() {
        let ds = Dataset::new(
            vec![
                SubjectRecord::complete(1.0, false, vec![0.3]),
                SubjectRecord::complete(2.0, false, vec![0.1]),
            ],
            2.0,
        )
        .unwrap();
        let grid = IndexGrid::new(&ds, &WeightScheme::Unit);
        assert_eq!(grid.m(), 0);
        let r = ee_residual(&ds, &WeightScheme::Unit, &grid, &[0.0], &[], IndexElement::Unit(0)).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn closed_form_is_root() {
        let ds = six();
        let f = crate::estimators::fit(&ds, &WeightScheme::Unit).unwrap();
        let jumps: Vec<f64> = f.lambda.jump_sizes().iter().map(|j| j.1).collect();
        let grid = IndexGrid::new(&ds, &WeightScheme::Unit);
        let r = ee_residuals(&ds, &WeightScheme::Unit, &grid, f.theta.as_slice(), &jumps).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12), "{r:?}");
        let sol = solve_ee(&ds, &WeightScheme::Unit, None, OracleOptions::default()).unwrap();
        assert!((sol.theta[0] - f.theta[0]).abs() <= 1e-8 * f.theta[0].abs().max(1.0));
        for (a, b) in sol.jumps.iter().zip(&jumps) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-300));
        }
        let again = solve_ee(
            &ds,
            &WeightScheme::Unit,
            Some((f.theta.as_slice(), &jumps)),
            OracleOptions::default(),
        )
        .unwrap();
        assert!(again.iterations <= 2);
    }

    #[test]
    fn perturbation_sign_follows_a() {
        let ds = six();
        let f = crate::estimators::fit(&ds, &WeightScheme::Unit).unwrap();
        let jumps: Vec<f64> = f.lambda.jump_sizes().iter().map(|j| j.1).collect();
        let grid = IndexGrid::new(&ds, &WeightScheme::Unit);
        let theta = [f.theta[0] + 0.1];
        let r = ee_residual(&ds, &WeightScheme::Unit, &grid, &theta, &jumps, IndexElement::Unit(0)).unwrap();
        assert!((r + f.a_matrix[(0, 0)] * 0.1).abs() < 1e-12);
    }

    #[test]
    fn constant_covariate_is_singular() {
        let ds = Dataset::new(
            (0..5)
                .map(|i| SubjectRecord::complete(0.5 + 0.3 * i as f64, i % 2 == 0, vec![1.0]))
                .collect(),
            1.7,
        )
        .unwrap();
        assert!(matches!(
            solve_ee(&ds, &WeightScheme::Unit, None, OracleOptions::default()),
            Err(Error::SingularJacobian)
        ));
    }
}
