//! Smoke tests of the installed binary: exit codes, output-root env var,
//! and the baseline subcommand.

use std::process::Command;

fn write_config(dir: &std::path::Path, out_sub: &str) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "scenario": {"recipe": "scalar-pair"},
        "sigma_w": 1.0,
        "delta": 0.1,
        "alpha_bar": 0.9,
        "warmup": {"t0": 800000, "kappa0": 3.0},
        "sequence": {"kind": "seeded", "switches": 4},
        "replicates": 1,
        "seed": 5,
        "output_dir": out_sub,
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn simulate_writes_outputs_under_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "exp");
    let status = Command::new(env!("CARGO_BIN_EXE_switchlqr"))
        .args(["simulate", "--config"])
        .arg(&cfg_path)
        .env("SWITCHLQR_OUT", dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    let summary = dir.path().join("exp/summary.json");
    assert!(summary.exists());
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(parsed["replicates"].as_array().unwrap().len(), 1);
    assert!(dir.path().join("exp/trace_ns4_rep0.csv").exists());
    // Seed override changes the trace.
    let status2 = Command::new(env!("CARGO_BIN_EXE_switchlqr"))
        .args(["simulate", "--config"])
        .arg(&cfg_path)
        .args(["--seed", "6"])
        .env("SWITCHLQR_OUT", dir.path())
        .status()
        .unwrap();
    assert!(status2.success());
}

#[test]
fn trace_row_count_matches_total_dwell() {
    // One replicate on a scripted 3-switch sequence: the CSV has one row per
    // executed step, i.e. the sum of the committed dwell times.
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "scenario": {"recipe": "scalar-pair"},
        "sigma_w": 1.0,
        "delta": 0.1,
        "alpha_bar": 0.9,
        "warmup": {"t0": 800000, "kappa0": 3.0},
        "sequence": {"kind": "scripted", "modes": [0, 1, 0, 1]},
        "replicates": 1,
        "seed": 12,
        "output_dir": dir.path().join("rows").display().to_string(),
    });
    let path = dir.path().join("config.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_switchlqr"))
        .args(["simulate", "--config"])
        .arg(&path)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(dir.path().join("rows/trace_ns3_rep0.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("rows/summary.json")).unwrap(),
    )
    .unwrap();
    let t_es = summary["replicates"][0]["t_es"].as_u64().unwrap();
    assert_eq!(rows.len() as u64, t_es + 1, "header plus one row per step");
    // Last column of the data rows tracks cumulative regret.
    assert!(rows[0].ends_with("cum_regret"));
}

#[test]
fn baseline_subcommand_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "base");
    let status = Command::new(env!("CARGO_BIN_EXE_switchlqr"))
        .args(["baseline", "--config"])
        .arg(&cfg_path)
        .env("SWITCHLQR_OUT", dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("base/summary.json").exists());
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        "{\"scenario\": {\"recipe\": \"scalar-pair\"}, \"sigma_W\": 1.0}",
    )
    .unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_switchlqr"))
        .args(["simulate", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("error"));
}

#[test]
fn all_replicates_failing_exits_nonzero() {
    // An unstable warm-up policy is rejected before simulation, so every
    // replicate fails hard and the process must not exit cleanly.
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "scenario": {"recipe": "scalar-pair"},
        "sigma_w": 1.0,
        "delta": 0.1,
        "alpha_bar": 0.9,
        "warmup": {"t0": 100, "kappa0": 3.0, "k0": [[[5.0]], [[5.0]]]},
        "sequence": {"kind": "seeded", "switches": 3},
        "replicates": 2,
        "seed": 5,
        "output_dir": dir.path().join("fail").display().to_string(),
    });
    let path = dir.path().join("config.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_switchlqr"))
        .args(["simulate", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(!output.status.success());
}

#[test]
fn plot_renders_from_summary() {
    let dir = tempfile::tempdir().unwrap();
    let summary = serde_json::json!({
        "per_ns": [
            {"ns": 8, "regret_mean": 3.0},
            {"ns": 32, "regret_mean": 6.0},
            {"ns": 128, "regret_mean": 11.0},
        ]
    });
    let path = dir.path().join("summary.json");
    std::fs::write(&path, serde_json::to_string(&summary).unwrap()).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_switchlqr"))
        .args(["plot", "--summary"])
        .arg(&path)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("regret_vs_ns.svg").exists());
}
