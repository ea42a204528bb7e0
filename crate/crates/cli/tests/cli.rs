use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmpc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, json).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn fixtures_list_names_all_seven() {
    let out = rmpc(&["fixtures", "list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.contains("irregular_bilinear_state\tirregular (fails condition 3)"));
}

#[test]
fn fixture_run_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = rmpc(&["--out", d, "fixtures", "run", "bilinear_cascade"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("bilinear_cascade.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(doc["certificate"]["classification"], "interior");
    assert_eq!(doc["conditions"]["condition_7"]["status"], "pass");
}

#[test]
fn unknown_fixture_and_bad_config_are_config_errors() {
    assert_eq!(rmpc(&["fixtures", "run", "nope"]).status.code(), Some(3));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{ "no_such_key": 1 }"#);
    assert_eq!(rmpc(&["--config", &cfg, "optimize"]).status.code(), Some(3));
    let cfg = write_config(
        dir.path(),
        r#"{ "bounds": { "lower": 200, "upper": 100 } }"#,
    );
    assert_eq!(rmpc(&["--config", &cfg, "optimize"]).status.code(), Some(3));
}

#[test]
fn simulate_writes_csv_and_drained_reach_is_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = rmpc(&["--out", d, "simulate", "--release", "150"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("step,time_s,Q_in,Q_out,H_1,"));
    assert_eq!(lines.count(), 73);

    // Releasing far more than flows in empties the reach.
    let out = rmpc(&["--out", d, "simulate", "--release", "5000"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn short_reproduce_run_reports_threshold_failure() {
    // Too few starts for the multi-start check, so the run must end with code 2.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{ "channel": { "horizon": 6 },
             "inflow": { "values": [100, 120, 140, 140, 120, 100] },
             "certify": { "condition_samples": 4, "invexity_pairs": 10, "membership_samples": 40 } }"#,
    );
    let out_dir = dir.path().join("out");
    let out = rmpc(&[
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "3",
        "reproduce-paper",
        "--starts",
        "3",
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("FAIL multistart_all_converged"));
    for f in [
        "trajectory.csv",
        "certificate.json",
        "conditions.json",
        "summary.json",
    ] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
}
