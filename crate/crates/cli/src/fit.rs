use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use serde::Serialize;
use zee::data::{load_csv_with_sigma, DEFAULT_SIGMA};
use zee::oracle::{ee_residuals, solve_ee, IndexGrid, OracleOptions};
use zee::variance::{influence_rows, model_based_variance, robust_variance};
use zee::{fit, min_eigenvalue, solve_gamma, Dataset, FitResult, Target, WeightScheme};

use crate::output::{emit, OutputDir, RunManifest};
use crate::{CliResult, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    /// Random sample, unit weights.
    Rs,
    /// Two-phase, inverse probability weights.
    Ipw,
    /// Two-phase, calibrated weights.
    Cal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceArg {
    Robust,
    Model,
    Both,
    None,
}

/// `S` for `Lambda(S)` or `S:z1,z2,...` for `Lambda(S | z)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionSpec {
    pub s: f64,
    pub z: Option<Vec<f64>>,
}

fn parse_prediction(text: &str) -> Result<PredictionSpec, String> {
    let number = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("`{t}` is not a number"));
    match text.split_once(':') {
        None => Ok(PredictionSpec { s: number(text)?, z: None }),
        Some((s, z)) => Ok(PredictionSpec {
            s: number(s)?,
            z: Some(z.split(',').map(number).collect::<Result<_, _>>()?),
        }),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// CSV with columns time, event[, selected, prob], z1..zp[, vtilde1..vtildeq].
    #[arg(long)]
    pub data: PathBuf,
    /// Administrative horizon.
    #[arg(long)]
    pub tau: f64,
    #[arg(long, value_enum, default_value = "rs")]
    pub scheme: SchemeArg,
    #[arg(long, value_enum, default_value = "both")]
    pub variance: VarianceArg,
    /// Cumulative hazard to report; repeatable. `S` or `S:z1,z2,...`.
    #[arg(long = "predict", value_parser = parse_prediction)]
    pub predictions: Vec<PredictionSpec>,
    /// Solve the estimating equations numerically and report the agreement.
    #[arg(long)]
    pub oracle_check: bool,
    /// Lower bound for sampling probabilities.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
    /// Write fit.json, fit.txt and manifest.json here.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Also write the estimated cumulative baseline hazard as CSV.
    #[arg(long)]
    #[serde(skip)]
    pub lambda_csv: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Curve {
    knots: Vec<f64>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct Prediction {
    s: f64,
    z: Option<Vec<f64>>,
    value: f64,
    se_robust: Option<f64>,
    se_model: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Calibration {
    gamma: Vec<f64>,
    max_residual: f64,
    iterations: usize,
}

#[derive(Debug, Default, Serialize)]
struct Diagnostics {
    a_min_eigenvalue: f64,
    robust_psd: Option<bool>,
    model_psd: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_max_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_max_relative_difference: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_iterations: Option<usize>,
}

#[derive(Debug, Serialize)]
struct FitOutput {
    schema_version: &'static str,
    scheme: &'static str,
    n: usize,
    p: usize,
    tau: f64,
    events: usize,
    selected: usize,
    theta: Vec<f64>,
    se_robust: Option<Vec<f64>>,
    se_model: Option<Vec<f64>>,
    lambda: Curve,
    predictions: Vec<Prediction>,
    calibration: Option<Calibration>,
    diagnostics: Diagnostics,
}

fn resolve_scheme(ds: &Dataset, scheme: SchemeArg) -> CliResult<(WeightScheme, Option<Calibration>)> {
    Ok(match scheme {
        SchemeArg::Rs => (WeightScheme::Unit, None),
        SchemeArg::Ipw => (WeightScheme::Ipw, None),
        SchemeArg::Cal => {
            if ds.q() == 0 {
                return Err(Failure::usage(
                    "scheme cal needs auxiliary columns vtilde1..vtildeq in the data",
                ));
            }
            let sol = solve_gamma(ds, zee::calibration::DEFAULT_TOLERANCE, zee::calibration::DEFAULT_MAX_ITER)?;
            let cal = Calibration {
                gamma: sol.gamma.clone(),
                max_residual: sol.max_residual(),
                iterations: sol.iterations,
            };
            (sol.scheme(), Some(cal))
        }
    })
}

fn oracle_check(ds: &Dataset, scheme: &WeightScheme, f: &FitResult, d: &mut Diagnostics) -> CliResult<()> {
    let grid = IndexGrid::new(ds, scheme);
    let jumps: Vec<f64> = f.lambda.jump_sizes().iter().map(|j| j.1).collect();
    if jumps.len() != grid.m() {
        return Err(Failure::internal("closed-form jumps do not match the oracle index grid"));
    }
    let residuals = ee_residuals(ds, scheme, &grid, f.theta.as_slice(), &jumps)?;
    d.oracle_max_residual = Some(residuals.iter().fold(0.0, |m: f64, r| m.max(r.abs())));
    let sol = solve_ee(ds, scheme, None, OracleOptions::default())?;
    let closed = f.theta.iter().chain(&jumps);
    let root = sol.theta.iter().chain(&sol.jumps);
    let rel = closed
        .zip(root)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    d.oracle_max_relative_difference = Some(rel);
    d.oracle_iterations = Some(sol.iterations);
    Ok(())
}

fn text_table(out: &FitOutput) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scheme {}  n = {}  events = {}  selected = {}  tau = {}", out.scheme, out.n, out.events, out.selected, out.tau);
    let _ = writeln!(s, "{:<22} {:>12} {:>12} {:>12}", "estimate", "value", "se_robust", "se_model");
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
    for (k, t) in out.theta.iter().enumerate() {
        let r = out.se_robust.as_ref().map(|v| v[k]);
        let m = out.se_model.as_ref().map(|v| v[k]);
        let _ = writeln!(s, "{:<22} {:>12.6} {:>12} {:>12}", format!("theta[{}]", k + 1), t, cell(r), cell(m));
    }
    for p in &out.predictions {
        let label = match &p.z {
            None => format!("Lambda({})", p.s),
            Some(z) => format!("Lambda({}|{})", p.s, z.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")),
        };
        let _ = writeln!(s, "{:<22} {:>12.6} {:>12} {:>12}", label, p.value, cell(p.se_robust), cell(p.se_model));
    }
    if let Some(c) = &out.calibration {
        let _ = writeln!(s, "gamma = {:?}  calibration residual = {:.2e}", c.gamma, c.max_residual);
    }
    if let Some(r) = out.diagnostics.oracle_max_residual {
        let _ = writeln!(s, "oracle: max residual {r:.2e}, max relative difference {:.2e}", out.diagnostics.oracle_max_relative_difference.unwrap_or(f64::NAN));
    }
    s
}

pub fn run(args: FitArgs, recorded: Vec<String>) -> CliResult<()> {
    let start = Instant::now();
    if !(args.tau > 0.0 && args.tau.is_finite()) {
        return Err(Failure::usage("--tau must be positive and finite"));
    }
    let ds = load_csv_with_sigma(&args.data, None, args.tau, args.sigma)?;
    let (scheme, calibration) = resolve_scheme(&ds, args.scheme)?;
    let f = fit(&ds, &scheme)?;

    let mut targets = vec![Target::Theta];
    for p in &args.predictions {
        targets.push(match &p.z {
            None => Target::Lambda { s: p.s },
            Some(z) if z.len() == ds.p() => Target::Pred { s: p.s, z: z.clone() },
            Some(z) => {
                return Err(Failure::usage(format!(
                    "prediction covariate has {} entries, data has p = {}",
                    z.len(),
                    ds.p()
                )))
            }
        });
    }
    let want_robust = matches!(args.variance, VarianceArg::Robust | VarianceArg::Both);
    let want_model = matches!(args.variance, VarianceArg::Model | VarianceArg::Both);
    let mut diagnostics = Diagnostics {
        a_min_eigenvalue: min_eigenvalue(&f.a_matrix),
        ..Diagnostics::default()
    };
    let mut robust = Vec::new();
    let mut model = Vec::new();
    if want_robust || want_model {
        for rows in influence_rows(&f, &targets)? {
            if want_robust {
                let v = robust_variance(&rows, &ds, &scheme)?;
                diagnostics.robust_psd = Some(diagnostics.robust_psd.unwrap_or(true) && v.is_psd());
                robust.push(v.standard_errors());
            }
            if want_model {
                let v = model_based_variance(&ds, &scheme, &f, &rows)?;
                diagnostics.model_psd = Some(diagnostics.model_psd.unwrap_or(true) && v.is_psd());
                model.push(v.standard_errors());
            }
        }
    }
    let se = |all: &Vec<Vec<f64>>, k: usize| all.get(k).map(|v| v[0]);
    let mut predictions = Vec::new();
    for (k, p) in args.predictions.iter().enumerate() {
        let value = match &p.z {
            None => f.lambda.eval(p.s)?,
            Some(z) => f.predict(z, p.s)?,
        };
        predictions.push(Prediction {
            s: p.s,
            z: p.z.clone(),
            value,
            se_robust: se(&robust, k + 1),
            se_model: se(&model, k + 1),
        });
    }
    if args.oracle_check {
        oracle_check(&ds, &scheme, &f, &mut diagnostics)?;
    }

    let knots = f.grid().times().to_vec();
    let values = f.lambda.values_at(&knots)?;
    let out = FitOutput {
        schema_version: "1",
        scheme: scheme.label(),
        n: ds.len(),
        p: ds.p(),
        tau: ds.tau(),
        events: ds.records().iter().filter(|r| r.event && r.time <= ds.tau()).count(),
        selected: ds.records().iter().filter(|r| r.selected).count(),
        theta: f.theta.iter().copied().collect(),
        se_robust: want_robust.then(|| robust[0].clone()),
        se_model: want_model.then(|| model[0].clone()),
        lambda: Curve { knots, values },
        predictions,
        calibration,
        diagnostics,
    };
    let json = serde_json::to_string_pretty(&out)?;
    emit(&(json + "\n"))?;

    let curve_csv = || {
        let mut s = String::from("time,lambda\n");
        for (t, v) in out.lambda.knots.iter().zip(&out.lambda.values) {
            let _ = writeln!(s, "{t},{v}");
        }
        s
    };
    if let Some(path) = &args.lambda_csv {
        std::fs::write(path, curve_csv())
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(dir) = &args.out {
        let mut files = OutputDir::new(dir);
        files.add_json("fit.json", &out)?;
        files.add("fit.txt", text_table(&out));
        let mut manifest = RunManifest::new("fit", recorded, serde_json::to_value(&args)?);
        manifest.add_input(&args.data)?;
        files.write(manifest, start.elapsed())?;
    }
    Ok(())
}
