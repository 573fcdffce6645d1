//! End-to-end checks of the command-line surface: config validation with
//! named fields, artifact layout, deterministic traces, and exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn qtrack_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qtrack"))
}

fn benchmark_config() -> serde_json::Value {
    serde_json::json!({
        "system": {
            "n": 2,
            "h0": [[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [-1.0, 0.0]],
            "mu": [[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]
        },
        "rho0": [[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
        "theta": [[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [-1.0, 0.0]],
        "grid": {"t_final": 8.0, "q": 161, "p": 61, "ds": 0.02},
        "seed": 11
    })
}

fn write_config(dir: &Path, name: &str, value: &serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

#[test]
fn validate_echoes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = benchmark_config();
    cfg.as_object_mut().unwrap().remove("grid");
    let path = write_config(dir.path(), "min.json", &cfg);
    let out = qtrack_bin()
        .args(["validate", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let echo = String::from_utf8(out.stdout).unwrap();
    assert!(echo.contains("\"q\": 501"), "{echo}");
    assert!(echo.contains("\"p\": 201"), "{echo}");
    assert!(echo.contains("\"ds\": 0.005"), "{echo}");
    assert!(echo.contains("\"algorithm\": \"grad\""), "{echo}");
}

#[test]
fn missing_field_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = benchmark_config();
    cfg["system"].as_object_mut().unwrap().remove("n");
    let path = write_config(dir.path(), "bad.json", &cfg);
    let out = qtrack_bin()
        .args(["validate", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("missing field `n`"), "{err}");
}

#[test]
fn morph_dimension_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = benchmark_config();
    cfg["system"]["morph_start"] = serde_json::json!({
        "h0": [[0.0, 0.0]], "mu": [[0.0, 0.0]]
    });
    cfg["system"]["morph_end"] = serde_json::json!({
        "h0": [[0.0, 0.0]], "mu": [[0.0, 0.0]]
    });
    let path = write_config(dir.path(), "morph.json", &cfg);
    let out = qtrack_bin()
        .args(["validate", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("morph_start"), "{err}");
}

#[test]
fn run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = benchmark_config();
    cfg["algorithm"] = serde_json::json!("utrack");
    cfg["initial_field"] = serde_json::json!({"kind": "resonant", "amplitude": 0.1, "frequency": 2.0});
    let path = write_config(dir.path(), "run.json", &cfg);
    let out_dir = dir.path().join("out");
    let out = qtrack_bin()
        .args(["run", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let trace = std::fs::read_to_string(out_dir.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 61);
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in [
            "s",
            "phi",
            "grad_norm",
            "fluence",
            "condition",
            "track_err",
            "pathlength_cum",
        ] {
            assert!(v.get(key).is_some(), "missing {key} in {line}");
        }
    }
    let field = std::fs::read_to_string(out_dir.join("field_final.csv")).unwrap();
    assert!(field.starts_with("t,epsilon\n"));
    assert_eq!(field.lines().count(), 162);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["algorithm"], "utrack");
    let pathlength = report["pathlength"].as_f64().unwrap();
    let geodesic = report["geodesic_distance"].as_f64().unwrap();
    assert!(pathlength >= geodesic - 1e-9);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = benchmark_config();
    cfg["initial_field"] = serde_json::json!({"kind": "random", "amplitude": 0.8});
    let path = write_config(dir.path(), "det.json", &cfg);
    let mut traces = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = qtrack_bin()
            .args(["run", "--config"])
            .arg(&path)
            .arg("--out")
            .arg(&out_dir)
            .arg("--seed")
            .arg("99")
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        traces.push(std::fs::read(out_dir.join("trace.jsonl")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn strict_mode_on_a_commuting_system_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = benchmark_config();
    // mu = H0 = sigma_z: rank-one dipole Gramian.
    cfg["system"]["mu"] = serde_json::json!([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [-1.0, 0.0]]);
    cfg["theta"] = serde_json::json!([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]);
    cfg["algorithm"] = serde_json::json!("utrack");
    let path = write_config(dir.path(), "strict.json", &cfg);
    let out_dir = dir.path().join("out");
    let out = qtrack_bin()
        .args(["run", "--strict", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    // The partial trace is still persisted.
    assert!(out_dir.join("trace.jsonl").exists());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["exit_status"], "singular");
}

#[test]
fn compare_emits_variance_rows_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = benchmark_config();
    let path = write_config(dir.path(), "cmp.json", &cfg);
    let mut report_paths = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = qtrack_bin()
            .args(["run", "--config"])
            .arg(&path)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        report_paths.push(out_dir.join("report.json"));
    }
    let out = qtrack_bin()
        .arg("compare")
        .args(&report_paths)
        .output()
        .unwrap();
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("variance_final_phi,,,0.000000000000e0"), "{table}");
    assert!(!table.contains(",true\n"), "{table}");

    // A missing report path is reported per path, not fatal.
    let out = qtrack_bin()
        .arg("compare")
        .args(&report_paths)
        .arg(dir.path().join("nope.json"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("nope.json"), "{err}");
}
