//! Weighted counting-process numerics on `[0, tau]`.
//!
//! Everything is organised around a [`RiskGrid`]: the distinct follow-up
//! times `t_1 < ... < t_K = tau` (times beyond `tau` are truncated to it).
//! On each interval `(t_{k-1}, t_k]` the at-risk set `{i : T_i >= t}` is
//! constant, so every integrand built from at-risk sums is a step function
//! and integrals are exact sums.

use crate::data::{validate, Dataset, WeightScheme};
use crate::error::{Error, Result};
use crate::step::{Continuity, StepFunction};

/// At-risk and event sums of a weighted cohort on its time grid.
#[derive(Debug, Clone)]
pub struct RiskGrid {
    pub(crate) n: usize,
    pub(crate) p: usize,
    pub(crate) tau: f64,
    /// Grid points `t_k`; the last is `tau`.
    pub(crate) times: Vec<f64>,
    /// `(1/N) sum w_i 1(T_i >= t)` on `(t_{k-1}, t_k]`.
    pub(crate) s0: Vec<f64>,
    /// `(1/N) sum w_i Z_i 1(T_i >= t)`, flattened `K x p`.
    pub(crate) s1: Vec<f64>,
    /// `(1/N) sum w_i Z_i Z_i' 1(T_i >= t)`, flattened `K x p x p`.
    pub(crate) s2: Vec<f64>,
    /// `s1 / s0`, flattened `K x p`.
    pub(crate) zbar: Vec<f64>,
    /// `(1/N) sum w_i Delta_i 1(T_i = t_k)`.
    pub(crate) dn: Vec<f64>,
    /// Grid index of each subject's truncated time.
    pub(crate) index: Vec<usize>,
    /// Event indicator after truncation at `tau`.
    pub(crate) event: Vec<bool>,
    pub(crate) weights: Vec<f64>,
    /// Covariates, flattened `N x p`, zero where absent.
    pub(crate) z: Vec<f64>,
}

impl RiskGrid {
    /// Builds the grid for the given per-subject weights. Fails with
    /// `ZeroRiskSet` if the weighted at-risk mass vanishes before `tau`.
    pub fn new(dataset: &Dataset, weights: &[f64]) -> Result<Self> {
        let n = dataset.len();
        let p = dataset.p();
        let tau = dataset.tau();
        let truncated: Vec<f64> = dataset.records().iter().map(|r| r.time.min(tau)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| truncated[a].total_cmp(&truncated[b]));

        let mut times = Vec::new();
        let mut index = vec![0usize; n];
        for &i in &order {
            let t = truncated[i];
            if times.last() != Some(&t) {
                times.push(t);
            }
            index[i] = times.len() - 1;
        }
        // A subject with T = 0 leaves the risk set immediately; the interval
        // (0, 0] is empty so it only shifts indices.
        if times.last() != Some(&tau) {
            times.push(tau);
        }
        let k_len = times.len();

        let mut z = vec![0.0; n * p];
        for (i, r) in dataset.records().iter().enumerate() {
            for k in 0..p {
                z[i * p + k] = r.z(k);
            }
        }
        let event: Vec<bool> = dataset
            .records()
            .iter()
            .map(|r| r.event && r.time <= tau)
            .collect();

        let inv_n = 1.0 / n as f64;
        let mut s0 = vec![0.0; k_len];
        let mut s1 = vec![0.0; k_len * p];
        let mut s2 = vec![0.0; k_len * p * p];
        let mut dn = vec![0.0; k_len];
        // Per-grid-point contributions, then reverse cumulative sums.
        for i in 0..n {
            let w = weights[i];
            if w == 0.0 {
                continue;
            }
            let k = index[i];
            let zi = &z[i * p..(i + 1) * p];
            s0[k] += w;
            for a in 0..p {
                s1[k * p + a] += w * zi[a];
                for b in 0..p {
                    s2[(k * p + a) * p + b] += w * zi[a] * zi[b];
                }
            }
            if event[i] {
                dn[k] += w * inv_n;
            }
        }
        for k in (0..k_len.saturating_sub(1)).rev() {
            s0[k] += s0[k + 1];
            for a in 0..p {
                s1[k * p + a] += s1[(k + 1) * p + a];
            }
            for ab in 0..p * p {
                s2[k * p * p + ab] += s2[(k + 1) * p * p + ab];
            }
        }
        s0.iter_mut().for_each(|v| *v *= inv_n);
        s1.iter_mut().for_each(|v| *v *= inv_n);
        s2.iter_mut().for_each(|v| *v *= inv_n);

        if let Some(k) = s0.iter().position(|&v| !(v > 0.0)) {
            let at = if k == 0 { 0.0 } else { times[k - 1] };
            return Err(Error::ZeroRiskSet(at));
        }
        let mut zbar = vec![0.0; k_len * p];
        for k in 0..k_len {
            for a in 0..p {
                zbar[k * p + a] = s1[k * p + a] / s0[k];
            }
        }
        Ok(RiskGrid {
            n,
            p,
            tau,
            times,
            s0,
            s1,
            s2,
            zbar,
            dn,
            index,
            event,
            weights: weights.to_vec(),
            z,
        })
    }

    /// Grid for a scheme, after validating it against the dataset.
    pub fn for_scheme(dataset: &Dataset, scheme: &WeightScheme) -> Result<Self> {
        validate(dataset, scheme)?;
        Self::new(dataset, &scheme.weights(dataset))
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub(crate) fn zbar_at(&self, k: usize) -> &[f64] {
        &self.zbar[k * self.p..(k + 1) * self.p]
    }

    pub(crate) fn z_of(&self, i: usize) -> &[f64] {
        &self.z[i * self.p..(i + 1) * self.p]
    }

    /// Length of interval `(t_{k-1}, t_k]`.
    pub(crate) fn len_at(&self, k: usize) -> f64 {
        if k == 0 {
            self.times[0]
        } else {
            self.times[k] - self.times[k - 1]
        }
    }

    /// Number of grid points `<= s`.
    pub(crate) fn count_upto(&self, s: f64) -> usize {
        self.times.partition_point(|&t| t <= s)
    }

    /// Prefix integrals of a per-interval rate `f_k`, evaluable at any `s`.
    pub(crate) fn prefix(&self, rate: impl Fn(usize) -> f64) -> Prefix {
        let rates: Vec<f64> = (0..self.len()).map(rate).collect();
        let mut cum = Vec::with_capacity(rates.len() + 1);
        cum.push(0.0);
        let mut acc = 0.0;
        for (k, r) in rates.iter().enumerate() {
            acc += r * self.len_at(k);
            cum.push(acc);
        }
        Prefix { cum, rates }
    }

    /// Prefix sums of point masses `m_k` located at `t_k`.
    pub(crate) fn point_prefix(&self, mass: impl Fn(usize) -> f64) -> Vec<f64> {
        let mut cum = Vec::with_capacity(self.len() + 1);
        cum.push(0.0);
        let mut acc = 0.0;
        for k in 0..self.len() {
            acc += mass(k);
            cum.push(acc);
        }
        cum
    }

    /// Reverse-cumulative at-risk sums `(1/N) sum_i w_i f_i 1(T_i >= t_k)`
    /// of a per-subject vector `f_i` of length `dim`, flattened `K x dim`.
    pub(crate) fn at_risk_sums(&self, dim: usize, f: impl Fn(usize, &mut [f64])) -> Vec<f64> {
        let k_len = self.len();
        let mut out = vec![0.0; k_len * dim];
        let mut buf = vec![0.0; dim];
        for i in 0..self.n {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            buf.iter_mut().for_each(|b| *b = 0.0);
            f(i, &mut buf);
            let k = self.index[i];
            for (o, b) in out[k * dim..(k + 1) * dim].iter_mut().zip(&buf) {
                *o += w * b;
            }
        }
        for k in (0..k_len.saturating_sub(1)).rev() {
            for d in 0..dim {
                out[k * dim + d] += out[(k + 1) * dim + d];
            }
        }
        let inv_n = 1.0 / self.n as f64;
        out.iter_mut().for_each(|v| *v *= inv_n);
        out
    }

    /// Grid interval containing `t` under the at-risk convention: `t` lies
    /// in `(t_{k-1}, t_k]`.
    pub(crate) fn interval_of(&self, t: f64) -> usize {
        self.times.partition_point(|&g| g < t).min(self.len() - 1)
    }

    /// `t -> (1/N) sum w_i 1(T_i >= t)`.
    pub fn at_risk_step(&self) -> StepFunction {
        let knots = self.times[..self.len() - 1].to_vec();
        StepFunction::new(self.tau, knots, self.s0.clone(), 1, Continuity::Left)
            .expect("grid times are strictly increasing")
    }

    /// `t -> zbar(t)`, vector valued.
    pub fn zbar_step(&self) -> StepFunction {
        let knots = self.times[..self.len() - 1].to_vec();
        StepFunction::new(self.tau, knots, self.zbar.clone(), self.p.max(1), Continuity::Left)
            .unwrap_or_else(|_| StepFunction::constant(self.tau, 0.0))
    }
}

/// Cumulative integral of a step rate on the grid.
#[derive(Debug, Clone)]
pub(crate) struct Prefix {
    cum: Vec<f64>,
    rates: Vec<f64>,
}

impl Prefix {
    /// `int_0^s rate(t) dt` given `m = grid.count_upto(s)` and the last full
    /// grid point `t_{m-1}`.
    pub(crate) fn at(&self, grid: &RiskGrid, s: f64) -> f64 {
        let m = grid.count_upto(s);
        let start = if m == 0 { 0.0 } else { grid.times[m - 1] };
        let partial = if m < self.rates.len() {
            (s - start) * self.rates[m]
        } else {
            0.0
        };
        self.cum[m] + partial
    }

    /// Integral up to grid point `k` inclusive.
    pub(crate) fn upto_index(&self, k: usize) -> f64 {
        self.cum[k + 1]
    }
}

/// `t -> (1/N) sum_i w_i 1(T_i >= t)` as a left-continuous step function.
pub fn at_risk_mean(dataset: &Dataset, scheme: &WeightScheme) -> Result<StepFunction> {
    Ok(RiskGrid::for_scheme(dataset, scheme)?.at_risk_step())
}

/// Weighted covariate mean among subjects at risk, `t -> zbar_w(t)`.
pub fn zbar(dataset: &Dataset, scheme: &WeightScheme) -> Result<StepFunction> {
    Ok(RiskGrid::for_scheme(dataset, scheme)?.zbar_step())
}

/// Exact integral of a step function over `[a, b]`.
pub fn integrate(f: &StepFunction, a: f64, b: f64) -> Result<Vec<f64>> {
    f.integrate(a, b)
}

/// Empirical `int_0^tau g dN`: `(1/N) sum_i w_i Delta_i g(T_i, Z_i)` over
/// events with `T_i <= tau`.
pub fn stieltjes_event_sum<G>(dataset: &Dataset, scheme: &WeightScheme, g: G) -> Result<Vec<f64>>
where
    G: Fn(f64, &[f64]) -> Vec<f64>,
{
    validate(dataset, scheme)?;
    let weights = scheme.weights(dataset);
    let inv_n = 1.0 / dataset.len() as f64;
    let mut acc: Vec<f64> = Vec::new();
    let mut z = Vec::with_capacity(dataset.p());
    for (r, w) in dataset.records().iter().zip(weights) {
        if !r.event || r.time > dataset.tau() || w == 0.0 {
            continue;
        }
        z.clear();
        z.extend((0..dataset.p()).map(|k| r.z(k)));
        let v = g(r.time, &z);
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += w * x * inv_n;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SubjectRecord;

    fn ds(times: &[f64], tau: f64) -> Dataset {
        let recs = times
            .iter()
            .map(|&t| SubjectRecord::complete(t, false, vec![t]))
            .collect();
        Dataset::new(recs, tau).unwrap()
    }

    fn two_phase(times: &[f64], probs: &[f64], tau: f64) -> Dataset {
        let recs = times
            .iter()
            .zip(probs)
            .map(|(&t, &pi)| SubjectRecord {
                sampling_prob: pi,
                ..SubjectRecord::complete(t, true, vec![1.0])
            })
            .collect();
        Dataset::new(recs, tau).unwrap()
    }

    #[test]
    fn at_risk_counts() {
        let d = ds(&[1.0, 3.0], 3.0);
        let f = at_risk_mean(&d, &WeightScheme::Unit).unwrap();
        assert_eq!(f.eval_scalar(0.0).unwrap(), 1.0);
        assert_eq!(f.eval_scalar(1.0).unwrap(), 1.0);
        assert_eq!(f.eval_scalar(1.5).unwrap(), 0.5);
        assert_eq!(f.eval_scalar(3.0).unwrap(), 0.5);
    }

    #[test]
    fn at_risk_ipw() {
        let d = two_phase(&[1.0, 3.0], &[0.5, 0.5], 3.0);
        let f = at_risk_mean(&d, &WeightScheme::Ipw).unwrap();
        assert_eq!(f.eval_scalar(1.0).unwrap(), 2.0);
        assert_eq!(f.eval_scalar(2.0).unwrap(), 1.0);
    }

    #[test]
    fn zero_risk_set() {
        // Construction already requires someone followed to tau, so build the
        // grid with a weight that empties the risk set instead.
        let d = two_phase(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], 3.0);
        assert!(matches!(
            RiskGrid::new(&d, &[1.0, 1.0, 0.0]),
            Err(Error::ZeroRiskSet(t)) if t == 2.0
        ));
        let recs = vec![
            SubjectRecord::complete(1.0, false, vec![]),
            SubjectRecord::complete(2.0, false, vec![]),
        ];
        assert!(matches!(Dataset::new(recs, 3.0), Err(Error::NoSubjectAtRiskAtTau(_))));
    }

    #[test]
    fn zbar_single_and_mean() {
        let d = Dataset::new(vec![SubjectRecord::complete(2.0, true, vec![2.0])], 2.0).unwrap();
        let f = zbar(&d, &WeightScheme::Unit).unwrap();
        assert_eq!(f.eval(1.0).unwrap(), &[2.0]);
        let d = Dataset::new(
            vec![
                SubjectRecord::complete(2.0, true, vec![0.0]),
                SubjectRecord::complete(2.0, false, vec![1.0]),
            ],
            2.0,
        )
        .unwrap();
        assert_eq!(zbar(&d, &WeightScheme::Unit).unwrap().eval(1.0).unwrap(), &[0.5]);
    }

    #[test]
    fn event_sums() {
        let d = Dataset::new(
            vec![
                SubjectRecord::complete(1.0, true, vec![0.0]),
                SubjectRecord::complete(2.0, true, vec![1.0]),
                SubjectRecord::complete(3.0, false, vec![1.0]),
            ],
            3.0,
        )
        .unwrap();
        let s = stieltjes_event_sum(&d, &WeightScheme::Unit, |_, _| vec![1.0]).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
        let d = ds(&[1.0, 2.0], 2.0);
        let s = stieltjes_event_sum(&d, &WeightScheme::Unit, |_, _| vec![1.0]).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn events_after_tau_are_censored() {
        let d = Dataset::new(
            vec![
                SubjectRecord::complete(1.0, true, vec![0.0]),
                SubjectRecord::complete(5.0, true, vec![1.0]),
            ],
            3.0,
        )
        .unwrap();
        let g = RiskGrid::new(&d, &[1.0, 1.0]).unwrap();
        assert_eq!(g.times(), &[1.0, 3.0]);
        assert_eq!(g.dn, vec![0.5, 0.0]);
    }
}
