//! End-to-end runs of the `smrepair` binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smrepair"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr_records(o: &Output) -> Vec<serde_json::Value> {
    String::from_utf8(o.stderr.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("stderr line `{l}` is not JSON: {e}")))
        .collect()
}

#[test]
fn sweep_matches_golden_file() {
    let o = bin(&["sweep", "--model", "I", "--d1", "2", "--sweep", "lambda=0:6:5"]);
    assert_eq!(o.status.code(), Some(0));
    let golden = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/sweep_model1_d2.csv")).unwrap();
    assert_eq!(stdout(&o), golden);
}

#[test]
fn default_sweep_grid_has_sixty_rows() {
    let o = bin(&["sweep", "--model", "III", "--d1", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 61);
    assert_eq!(lines[0], smrepair::cli::SWEEP_HEADER);
    let first: f64 = lines[1].split(',').next().unwrap().parse().unwrap();
    assert!((first - 6.0 / 61.0).abs() < 1e-11);
}

#[test]
fn output_is_identical_across_runs_and_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for workers in ["1", "3", "1"] {
        let path = dir.path().join(format!("cmp{}.csv", outs.len()));
        let o = bin(&[
            "compare", "--model", "IV", "--d1", "2", "--d2", "2", "--N", "40", "--horizon", "60", "--warmup", "6",
            "--replications", "3", "--seed", "77", "--sweep", "lambda=1,3", "--workers", workers, "--out",
            path.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
        assert!(o.stdout.is_empty());
        outs.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0], outs[2]);
    let text = String::from_utf8(outs[0].clone()).unwrap();
    assert!(text.starts_with(smrepair::cli::COMPARE_HEADER));
    assert_eq!(text.lines().count(), 3);

    let sim = |seed: &str| bin(&["simulate", "--model", "II", "--lambda", "2", "--N", "30", "--horizon", "40", "--warmup", "4", "--seed", seed]).stdout;
    assert_eq!(sim("5"), sim("5"));
    assert_ne!(sim("5"), sim("6"));
}

#[test]
fn solve_json_reports_boundary_values() {
    let o = bin(&["solve", "--model", "I", "--lambda", "3", "--d1", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let pw = &v["fixed_point"]["pi_w"];
    assert_eq!(format!("{:.6}", pw[0].as_f64().unwrap()), "0.866667");
    assert_eq!(format!("{:.6}", pw[1].as_f64().unwrap()), "0.333333");
    assert_eq!(format!("{:.6}", v["fixed_point"]["pi_r"][0].as_f64().unwrap()), "0.133333");
    assert_eq!(v["config"]["mu"], 9.0);
    assert!(v["metrics"]["flow_imbalance"].as_f64().unwrap().abs() < 1e-8);
}

#[test]
fn exit_codes_and_error_records() {
    let o = bin(&["solve", "--model", "II", "--lambda", "7"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_records(&o)[0]["kind"], "unstable");

    let o = bin(&["solve", "--model", "II", "--lambda", "5.9", "--d2", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let recs = stderr_records(&o);
    assert!(recs.iter().any(|r| r["kind"] == "non_convergence" && r["code"] == 2));

    let o = bin(&["solve", "--lambda", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = bin(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_records(&o)[0]["level"], "error");
    let o = bin(&["solve", "--model", "I", "--lambda", "1", "--out", "/nonexistent-dir/x.json"]);
    assert_eq!(o.status.code(), Some(1));

    let o = bin(&["simulate", "--model", "I", "--lambda", "7", "--N", "10", "--horizon", "5", "--warmup", "1", "--replications", "2"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr_records(&o).iter().any(|r| r["level"] == "warning"));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "model = \"IV\"\nmu = 9.0\nalpha = 2.0\nbeta = 5.0\nd1 = 2\nd2 = 2\nsweep = [\"lambda=1,2\"]\nformat = \"json\"\n").unwrap();
    let o = bin(&["sweep", "--config", cfg.to_str().unwrap(), "--d2", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let rows: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert_eq!(row["config"]["d2"], 3);
        assert_eq!(row["config"]["beta"], 5.0);
        assert_eq!(row["model"], "IV");
    }
}
