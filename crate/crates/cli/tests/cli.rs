use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn zee(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zee"))
        .args(args)
        .current_dir(root())
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn assert_valid(schema: &str, instance: &Value) {
    let text = fs::read_to_string(root().join("schemas").join(schema)).unwrap();
    let schema: Value = serde_json::from_str(&text).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{schema}: {errors:#?}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fit_random_sample_validates() {
    let v = json(&zee(&["fit", "--data", "data/rs_toy.csv", "--tau", "2", "--predict", "1", "--predict", "1.5:0.5,0.5"]));
    assert_valid("fit.schema.json", &v);
    assert_eq!(v["scheme"], "rs");
    assert_eq!(v["theta"].as_array().unwrap().len(), 2);
    assert_eq!(v["predictions"].as_array().unwrap().len(), 2);
    assert_eq!(v["diagnostics"]["robust_psd"], true);
}

#[test]
fn fit_calibrated_without_auxiliaries_is_a_data_error() {
    let out = zee(&["fit", "--data", "data/rs_toy.csv", "--tau", "2", "--scheme", "cal"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn fit_two_phase_data_with_unit_scheme_is_a_data_error() {
    assert_eq!(code(&zee(&["fit", "--data", "data/two_phase_demo.csv", "--tau", "2"])), 2);
}

#[test]
fn fit_oracle_check_agrees() {
    let v = json(&zee(&["fit", "--data", "data/rs_toy.csv", "--tau", "2", "--oracle-check"]));
    let d = &v["diagnostics"];
    assert!(d["oracle_max_residual"].as_f64().unwrap() <= 1e-8);
    assert!(d["oracle_max_relative_difference"].as_f64().unwrap() <= 1e-8);
    assert_valid("fit.schema.json", &v);
}

#[test]
fn fit_two_phase_schemes_validate() {
    for scheme in ["ipw", "cal"] {
        let v = json(&zee(&["fit", "--data", "data/two_phase_demo.csv", "--tau", "2", "--scheme", scheme, "--predict", "1:0.5,0.5", "--oracle-check"]));
        assert_valid("fit.schema.json", &v);
        assert!(v["diagnostics"]["oracle_max_residual"].as_f64().unwrap() <= 1e-8);
        assert_eq!(v["calibration"].is_null(), scheme == "ipw");
    }
}

#[test]
fn fit_writes_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("fit");
    let csv = dir.path().join("lambda.csv");
    let v = json(&zee(&[
        "fit", "--data", "data/rs_toy.csv", "--tau", "2", "--variance", "robust",
        "--out", out_dir.to_str().unwrap(), "--lambda-csv", csv.to_str().unwrap(),
    ]));
    assert!(v["se_model"].is_null());
    assert_eq!(read_json(&out_dir.join("fit.json")), v);
    let manifest = read_json(&out_dir.join("manifest.json"));
    assert_valid("manifest.schema.json", &manifest);
    assert_eq!(manifest["command"], "fit");
    let lines = fs::read_to_string(csv).unwrap().lines().count();
    assert_eq!(lines, 1 + v["lambda"]["knots"].as_array().unwrap().len());
}

#[test]
fn fit_rejects_bad_arguments() {
    assert_eq!(code(&zee(&["fit", "--data", "data/rs_toy.csv", "--tau", "0"])), 2);
    assert_eq!(code(&zee(&["fit", "--data", "data/missing.csv", "--tau", "2"])), 2);
    assert_eq!(code(&zee(&["fit", "--data", "data/rs_toy.csv", "--tau", "2", "--predict", "1:0.5"])), 2);
    assert_eq!(code(&zee(&["fit", "--data", "data/rs_toy.csv", "--tau", "2", "--predict", "x"])), 2);
    assert_eq!(code(&zee(&["fit", "--data", "data/rs_toy.csv", "--tau", "2", "--predict", "3"])), 2);
}

#[test]
fn calibrate_full_selection_gives_zero_gamma() {
    let v = json(&zee(&["calibrate", "--data", "data/all_selected.csv", "--tau", "2"]));
    assert_valid("calibrate.schema.json", &v);
    for g in v["gamma"].as_array().unwrap() {
        assert!(g.as_f64().unwrap().abs() <= 1e-10);
    }
}

#[test]
fn calibrate_singular_auxiliaries_is_numerical_failure() {
    let out = zee(&["calibrate", "--data", "data/singular_aux.csv", "--tau", "2"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("auxiliary second-moment matrix is singular"));
}

#[test]
fn calibrate_demo_meets_constraints() {
    let dir = tempfile::tempdir().unwrap();
    let v = json(&zee(&["calibrate", "--data", "data/two_phase_demo.csv", "--tau", "2", "--out", dir.path().to_str().unwrap()]));
    assert_valid("calibrate.schema.json", &v);
    assert!(v["max_residual"].as_f64().unwrap() <= 1e-10);
    assert_eq!(v["converged"], true);
    assert_valid("manifest.schema.json", &read_json(&dir.path().join("manifest.json")));
}

#[test]
fn simulate_rejects_zero_replicates() {
    let dir = tempfile::tempdir().unwrap();
    let out = zee(&["simulate", "--config", "configs/quick.toml", "--replicates", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&zee(&["simulate", "--config", "configs/missing.toml", "--out", "x"])), 2);
}

#[test]
fn simulate_is_reproducible_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["simulate", "--config", "configs/quick.toml", "--n", "150", "--seed", "5", "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = zee(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    run(&a, &[]);
    run(&b, &["--sequential", "--jobs", "1"]);
    let report = fs::read(a.join("report.json")).unwrap();
    assert_eq!(report, fs::read(b.join("report.json")).unwrap());
    assert_eq!(fs::read(a.join("estimates.csv")).unwrap(), fs::read(b.join("estimates.csv")).unwrap());

    let r: Value = serde_json::from_slice(&report).unwrap();
    assert_valid("report.schema.json", &r);
    assert_eq!(r["estimators"].as_array().unwrap().len(), 12);
    assert_eq!(r["config"]["dgp"]["n"], 150);
    let manifest = read_json(&a.join("manifest.json"));
    assert_valid("manifest.schema.json", &manifest);
    assert_eq!(manifest["seed"], 5);
    let manifests = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().file_name() == "manifest.json").count();
    assert_eq!(manifests, 1);

    let o = zee(&["replay", a.join("manifest.json").to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    for f in ["report.json", "report.txt", "estimates.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(c.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn log_level_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_zee"))
        .args(["calibrate", "--data", "data/two_phase_demo.csv", "--tau", "2", "--out", dir.path().to_str().unwrap()])
        .current_dir(root())
        .env("ZEE_LOG", "info")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("INFO"));
}

#[test]
fn bundled_acceptance_config_covers() {
    let dir = tempfile::tempdir().unwrap();
    let out = zee(&["simulate", "--config", "configs/acceptance.toml", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let r = read_json(&dir.path().join("report.json"));
    assert_valid("report.schema.json", &r);
    for e in r["estimators"].as_array().unwrap() {
        let c = e["robust"]["coverage"].as_f64().unwrap();
        assert!((0.93..=0.97).contains(&c), "{} {} coverage {c}", e["scheme"], e["target"]);
    }
}
