//! End-to-end tests of the srusk binary: exit codes, file outputs,
//! diagnostics shape, determinism, and JSON schema conformance.

use std::path::{Path, PathBuf};
use std::process::Command;

fn srusk() -> Command {
    Command::new(env!("CARGO_BIN_EXE_srusk"))
}

fn models() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn schemas() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

fn validate(schema_file: &str, value: &serde_json::Value) {
    let schema: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(schemas().join(schema_file)).unwrap())
            .unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{schema_file} violations: {errors:?}");
}

#[test]
fn analyze_regular_model() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("analyze.json");
    let out = srusk()
        .arg("analyze")
        .arg(models().join("oscillator.lag"))
        .arg("--json")
        .arg(&json)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Regular"), "{stdout}");
    assert!(stdout.contains("stabilized at level 2"), "{stdout}");
    assert!(stdout.contains("unique on graph_L"), "{stdout}");
    let value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    validate("analyze.schema.json", &value);
}

#[test]
fn analyze_singular_model() {
    let out = srusk().arg("analyze").arg(models().join("singular2.lag")).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Singular rank 1"), "{stdout}");
    assert!(stdout.contains("stabilized at level 3"), "{stdout}");
    assert!(stdout.contains("1 free parameter"), "{stdout}");
}

#[test]
fn analyze_rejects_bad_model_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.lag");
    std::fs::write(&bad, "dim 1;\nL = p1*qd1;\n").unwrap();
    let out = srusk().arg("analyze").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("broken.lag:2:5: momentum coordinate not allowed in L"),
        "{stderr}"
    );
}

#[test]
fn simulate_oscillator_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = srusk()
        .arg("simulate")
        .arg(models().join("oscillator.lag"))
        .args(["--ic", "0,1,0", "--h", "1e-3", "--T", "6.2832"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("oscillator_trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,q1,tau,p1,qd1,drift");
    let last = lines.last().unwrap();
    let fields: Vec<f64> = last.split(',').map(|v| v.parse().unwrap()).collect();
    assert!((fields[1] - 1.0).abs() < 1e-6, "final q1 = {}", fields[1]);

    let value: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("oscillator_trajectory.json")).unwrap(),
    )
    .unwrap();
    validate("trajectory.schema.json", &value);
    assert_eq!(value["config"]["seed"], serde_json::json!(42));
}

#[test]
fn simulate_singular_freezes_velocity_and_defaults_binding() {
    let dir = tempfile::tempdir().unwrap();
    let out = srusk()
        .arg("simulate")
        .arg(models().join("singular2.lag"))
        .args(["--bind", "u1=0", "--T", "1.0"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("singular2_trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let qd1_col = header.iter().position(|&h| h == "qd1").unwrap();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[qd1_col], "0", "qd1 column must stay identically 0");
    }
}

#[test]
fn simulate_rejects_inconsistent_ic() {
    let out = srusk()
        .arg("simulate")
        .arg(models().join("singular2.lag"))
        .args(["--ic", "0,1,0,0.5,0", "--bind", "u1=0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("violated"), "{stderr}");
    assert!(stderr.contains("0.5"), "{stderr}");
}

#[test]
fn simulate_requires_some_ic() {
    let dir = tempfile::tempdir().unwrap();
    let bare = dir.path().join("bare.lag");
    std::fs::write(&bare, "dim 1; L = 1/2*qd1^2;").unwrap();
    let out = srusk().arg("simulate").arg(&bare).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn verify_corpus_models_pass() {
    let dir = tempfile::tempdir().unwrap();
    for model in [
        "free_particle.lag",
        "oscillator.lag",
        "oscillator_driven.lag",
        "singular2.lag",
        "degenerate.lag",
    ] {
        let json = dir.path().join(format!("{model}.verify.json"));
        let out = srusk()
            .arg("verify")
            .arg(models().join(model))
            .arg("--json")
            .arg(&json)
            .output()
            .unwrap();
        assert_eq!(
            out.status.code(),
            Some(0),
            "{model}: {}",
            String::from_utf8_lossy(&out.stdout)
        );
        let value: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        validate("verify.schema.json", &value);
        assert_eq!(value["all_passed"], serde_json::json!(true));
    }
}

#[test]
fn verify_corrupted_omega_is_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("verify.json");
    let out = srusk()
        .arg("verify")
        .arg(models().join("oscillator.lag"))
        .arg("--json")
        .arg(&json)
        .env("SRUSK_TEST_CORRUPT", "omega-sign")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("report at"), "{stderr}");
    let value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    validate("verify.schema.json", &value);
    assert_eq!(value["all_passed"], serde_json::json!(false));
}

#[test]
fn verify_reports_are_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let json = dir.path().join(name);
        let out = srusk()
            .arg("verify")
            .arg(models().join("singular2.lag"))
            .args(["--seed", "7"])
            .arg("--json")
            .arg(&json)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        std::fs::read(&json).unwrap()
    };
    assert_eq!(run("a.json"), run("b.json"), "identical seeds must give identical bytes");
}

#[test]
fn seed_env_fallback_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let with_env = {
        let json = dir.path().join("env.json");
        let out = srusk()
            .arg("verify")
            .arg(models().join("free_particle.lag"))
            .arg("--json")
            .arg(&json)
            .env("SRUSK_SEED", "123")
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(&json).unwrap())
            .unwrap()
    };
    assert_eq!(with_env["seed"], serde_json::json!(123));
}

#[test]
fn analyze_reports_empty_final_chain() {
    let dir = tempfile::tempdir().unwrap();
    let inconsistent = dir.path().join("inconsistent.lag");
    std::fs::write(&inconsistent, "dim 1; L = t*qd1;").unwrap();
    let out = srusk().arg("analyze").arg(&inconsistent).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("empty final set"), "{stdout}");
    // and simulate refuses it as a model error
    let out = srusk().arg("simulate").arg(&inconsistent).args(["--ic", "0,0,0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_points_flag_controls_witness_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let count_witnesses = |points: &str| {
        let json = dir.path().join(format!("points{points}.json"));
        let out = srusk()
            .arg("analyze")
            .arg(models().join("oscillator.lag"))
            .args(["--points", points])
            .arg("--json")
            .arg(&json)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        let value: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        value["chain"]["levels"][1]["witness_points"].as_array().unwrap().len()
    };
    assert_eq!(count_witnesses("5"), 5);
    assert_eq!(count_witnesses("30"), 30);
}

#[test]
fn analyze_rejects_variable_rank() {
    let dir = tempfile::tempdir().unwrap();
    let vr = dir.path().join("cubic.lag");
    std::fs::write(&vr, "dim 1; L = qd1^3;").unwrap();
    let out = srusk().arg("analyze").arg(&vr).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("variable-rank"));
}
