//! Piecewise-constant functions on `[0, tau]` with exact integration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of a knot a piece is closed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Continuity {
    /// Pieces are `[k_j, k_{j+1})`; the value at a knot is the value after it.
    Right,
    /// Pieces are `(k_j, k_{j+1}]`; the value at a knot is the value before
    /// it. At-risk processes `1[T >= t]` have this form.
    Left,
}

/// Vector-valued step function on `[0, tau]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    tau: f64,
    knots: Vec<f64>,
    /// `(knots.len() + 1) * dim` values; piece 0 holds the value at 0.
    values: Vec<f64>,
    dim: usize,
    continuity: Continuity,
}

impl StepFunction {
    /// `knots` must be strictly increasing within `[0, tau]`, and `values`
    /// must hold `knots.len() + 1` pieces of length `dim`.
    pub fn new(
        tau: f64,
        knots: Vec<f64>,
        values: Vec<f64>,
        dim: usize,
        continuity: Continuity,
    ) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::DomainError(format!("tau must be positive, got {tau}")));
        }
        if knots.windows(2).any(|w| w[0] >= w[1])
            || knots.first().is_some_and(|&k| k < 0.0)
            || knots.last().is_some_and(|&k| k > tau)
        {
            return Err(Error::DomainError("knots must increase strictly within [0, tau]".into()));
        }
        if dim == 0 || values.len() != (knots.len() + 1) * dim {
            return Err(Error::DomainError(format!(
                "expected {} values for {} knots of dimension {dim}",
                (knots.len() + 1) * dim,
                knots.len()
            )));
        }
        Ok(StepFunction {
            tau,
            knots,
            values,
            dim,
            continuity,
        })
    }

    pub fn scalar(tau: f64, knots: Vec<f64>, values: Vec<f64>, continuity: Continuity) -> Result<Self> {
        Self::new(tau, knots, values, 1, continuity)
    }

    pub fn constant(tau: f64, value: f64) -> Self {
        StepFunction {
            tau,
            knots: Vec::new(),
            values: vec![value],
            dim: 1,
            continuity: Continuity::Right,
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn continuity(&self) -> Continuity {
        self.continuity
    }

    pub fn pieces(&self) -> usize {
        self.knots.len() + 1
    }

    /// Value of piece `j` (piece 0 starts at 0).
    pub fn piece(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    fn piece_at(&self, t: f64) -> usize {
        match self.continuity {
            Continuity::Right => self.knots.partition_point(|&k| k <= t),
            Continuity::Left => self.knots.partition_point(|&k| k < t),
        }
    }

    fn check(&self, t: f64) -> Result<()> {
        if t >= 0.0 && t <= self.tau {
            Ok(())
        } else {
            Err(Error::DomainError(format!("t = {t} outside [0, {}]", self.tau)))
        }
    }

    pub fn eval(&self, t: f64) -> Result<&[f64]> {
        self.check(t)?;
        Ok(self.piece(self.piece_at(t)))
    }

    pub fn eval_scalar(&self, t: f64) -> Result<f64> {
        self.eval(t).map(|v| v[0])
    }

    /// Exact integral over `[a, b]`: the sum of value times overlap length.
    pub fn integrate(&self, a: f64, b: f64) -> Result<Vec<f64>> {
        self.check(a)?;
        self.check(b)?;
        if a > b {
            return Err(Error::DomainError(format!("empty interval [{a}, {b}]")));
        }
        let mut out = vec![0.0; self.dim];
        let first = self.knots.partition_point(|&k| k <= a);
        let mut left = a;
        for j in first..=self.knots.len() {
            let right = self.knots.get(j).copied().unwrap_or(self.tau).min(b);
            if right > left {
                let len = right - left;
                for (o, v) in out.iter_mut().zip(self.piece(j)) {
                    *o += v * len;
                }
            }
            if right >= b {
                break;
            }
            left = right;
        }
        Ok(out)
    }

    pub fn integrate_scalar(&self, a: f64, b: f64) -> Result<f64> {
        self.integrate(a, b).map(|v| v[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn integrates_constant() {
        let f = StepFunction::constant(3.0, 1.0);
        assert_eq!(f.integrate_scalar(0.0, 3.0).unwrap(), 3.0);
    }

    #[test]
    fn integrates_two_pieces() {
        let f = StepFunction::scalar(3.0, vec![1.0], vec![2.0, 0.0], Continuity::Right).unwrap();
        assert_eq!(f.integrate_scalar(0.0, 3.0).unwrap(), 2.0);
        assert_eq!(f.integrate_scalar(1.5, 1.5).unwrap(), 0.0);
        assert_eq!(f.integrate_scalar(0.5, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_interval() {
        let f = StepFunction::scalar(3.0, vec![1.0], vec![2.0, 5.0], Continuity::Left).unwrap();
        assert_eq!(f.integrate_scalar(1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn domain_errors() {
        let f = StepFunction::constant(3.0, 1.0);
        assert!(matches!(f.integrate(0.0, 3.5), Err(Error::DomainError(_))));
        assert!(matches!(f.integrate(-0.1, 1.0), Err(Error::DomainError(_))));
        assert!(f.eval(3.1).is_err());
    }

    #[test]
    fn continuity_at_knots() {
        let right = StepFunction::scalar(3.0, vec![1.0], vec![1.0, 0.5], Continuity::Right).unwrap();
        let left = StepFunction::scalar(3.0, vec![1.0], vec![1.0, 0.5], Continuity::Left).unwrap();
        assert_eq!(right.eval_scalar(1.0).unwrap(), 0.5);
        assert_eq!(left.eval_scalar(1.0).unwrap(), 1.0);
        assert_eq!(left.eval_scalar(1.0 + 1e-12).unwrap(), 0.5);
        assert_eq!(left.eval_scalar(0.0).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_knots() {
        assert!(StepFunction::scalar(3.0, vec![2.0, 1.0], vec![0.0; 3], Continuity::Right).is_err());
        assert!(StepFunction::scalar(3.0, vec![4.0], vec![0.0; 2], Continuity::Right).is_err());
        assert!(StepFunction::scalar(3.0, vec![1.0], vec![0.0; 3], Continuity::Right).is_err());
    }

    fn arb_step() -> impl Strategy<Value = StepFunction> {
        (1usize..8)
            .prop_flat_map(|m| {
                (
                    proptest::collection::vec(0.01f64..0.99, m),
                    proptest::collection::vec(-5.0f64..5.0, m + 1),
                )
            })
            .prop_filter_map("distinct knots", |(mut k, v)| {
                k.iter_mut().for_each(|x| *x *= 4.0);
                k.sort_by(f64::total_cmp);
                k.dedup();
                let v = v[..=k.len()].to_vec();
                StepFunction::scalar(4.0, k, v, Continuity::Right).ok()
            })
    }

    proptest! {
        #[test]
        fn integration_is_additive(f in arb_step(), a in 0.0f64..4.0, b in 0.0f64..4.0, c in 0.0f64..4.0) {
            let mut xs = [a, b, c];
            xs.sort_by(f64::total_cmp);
            let [a, b, c] = xs;
            let whole = f.integrate_scalar(a, c).unwrap();
            let parts = f.integrate_scalar(a, b).unwrap() + f.integrate_scalar(b, c).unwrap();
            let scale = f.integrate(0.0, 4.0).unwrap()[0].abs().max(1.0) * 5.0;
            prop_assert!((whole - parts).abs() <= 1e-12 * scale);
        }
    }
}
