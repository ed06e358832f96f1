use std::path::Path;
use std::process::{Command, Output};

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wolbachia"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn steady_states_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["steady-states"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("steady_states.csv")).unwrap();
    assert!(csv.lines().count() >= 5);
    assert!(dir.path().join("config.json").exists());
}

#[test]
fn solve_reduced_reports_both_cases() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["solve-reduced", "--c-budget", "0.75"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("early_release"));
    let o = run(dir.path(), &["solve-reduced", "--c-budget", "0.15"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("late_release"));
    let v = json(&dir.path().join("solution.json"));
    assert!(v["solution"]["predicted_cost"].as_f64().unwrap() > 0.7);
}

#[test]
fn small_budget_release_fails_to_replace() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["simulate", "--control", "analytic", "--system", "full", "--c-budget", "0.15"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&dir.path().join("summary.json"));
    // wild equilibrium of the reference biology is 0.73
    assert!(v["final_n1"].as_f64().unwrap() > 0.5 * 0.73);
    assert!(dir.path().join("trajectory.csv").exists());
}

#[test]
fn control_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ctl = dir.path().join("u.csv");
    let mut s = String::from("t,u\n");
    for k in 0..1000 {
        s.push_str(&format!("{},{}\n", k as f64 * 0.01, if k < 7 { 10.0 } else { 0.0 }));
    }
    std::fs::write(&ctl, s).unwrap();
    let o = run(dir.path(), &["simulate", "--control", ctl.to_str().unwrap(), "--system", "reduced", "--dt", "0.01"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&dir.path().join("summary.json"));
    assert!((v["budget"].as_f64().unwrap() - 0.7).abs() < 1e-12);
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"d1": 2.0, "m": -1}"#).unwrap();
    let o = run(dir.path(), &["steady-states", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("invalid configuration"), "{err}");

    std::fs::write(&cfg, r#"{"typo_field": 1}"#).unwrap();
    let o = run(dir.path(), &["steady-states", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let o = run(dir.path(), &["solve-reduced", "--eps", "-1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn check_passes_on_reference_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["check"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("check.txt").exists());
}

#[test]
fn sweep_c_brackets_the_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["sweep-c", "--dt", "0.01"]);
    assert!(o.status.success());
    let v = json(&dir.path().join("sweep_c.json"));
    let b = v["bracket"].as_array().unwrap();
    let (lo, hi) = (b[0].as_f64().unwrap(), b[1].as_f64().unwrap());
    assert!(lo <= hi && (0.21..=0.27).contains(&lo) && (0.21..=0.27).contains(&hi));
}
