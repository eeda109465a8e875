#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zee::calibration::{solve_gamma, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE};
use zee::{fit, Dataset, SubjectRecord, WeightScheme};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Unit,
    Ipw,
    Cal,
}

pub const KINDS: [Kind; 3] = [Kind::Unit, Kind::Ipw, Kind::Cal];

/// Small random dataset under the requested scheme. Resamples until the
/// fit exists, so the returned pair always fits.
pub fn random_case(rng: &mut ChaCha8Rng, n: usize, p: usize, kind: Kind) -> (Dataset, WeightScheme) {
    loop {
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<f64> = (0..p).map(|_| rng.random::<f64>() * 2.0 - 0.5).collect();
            let time = 0.05 + rng.random::<f64>() * 3.0;
            let event = rng.random::<f64>() < 0.6;
            let prob = if kind == Kind::Unit || event { 1.0 } else { 0.5 };
            let selected = kind == Kind::Unit || rng.random::<f64>() < prob;
            let surrogate = z.first().copied().unwrap_or(0.0) + 0.3 * (rng.random::<f64>() - 0.5);
            records.push(SubjectRecord {
                time,
                event,
                covariates: z.into_iter().map(|v| selected.then_some(v)).collect(),
                auxiliary: if kind == Kind::Cal { vec![1.0, surrogate] } else { vec![] },
                selected,
                sampling_prob: prob,
            });
        }
        let tau = records.iter().map(|r| r.time).fold(0.0, f64::max);
        let Ok(ds) = Dataset::new(records, tau) else { continue };
        let scheme = match kind {
            Kind::Unit => WeightScheme::Unit,
            Kind::Ipw => WeightScheme::Ipw,
            Kind::Cal => match solve_gamma(&ds, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER) {
                Ok(sol) => sol.scheme(),
                Err(_) => continue,
            },
        };
        if fit(&ds, &scheme).is_ok() {
            return (ds, scheme);
        }
    }
}

/// `max |a - b| / max |b|`.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Direct-sum weighted covariate mean over `{T_i >= t}`.
pub fn direct_zbar(ds: &Dataset, w: &[f64], t: f64) -> Vec<f64> {
    let p = ds.p();
    let mut num = vec![0.0; p];
    let mut den = 0.0;
    for (r, &wi) in ds.records().iter().zip(w) {
        if wi != 0.0 && r.time.min(ds.tau()) >= t {
            den += wi;
            for k in 0..p {
                num[k] += wi * r.covariates[k].unwrap();
            }
        }
    }
    num.iter().map(|v| v / den).collect()
}
