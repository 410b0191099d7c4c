use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scfo::cli::{parse_sweep, Sweep, OUT_DIR_ENV};
use scfo::simharness::{run_scenario, ScenarioConfig};

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

fn scfo(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scfo"));
    cmd.args(args).env_remove(OUT_DIR_ENV);
    if let Some(d) = env_out {
        cmd.env(OUT_DIR_ENV, d);
    }
    cmd.output().expect("binary runs")
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&o.stdout)))
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn single_run_writes_trajectory_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario_path("degrading_minus");
    let o = scfo(&["run", cfg.to_str().unwrap(), "--seed", "7", "--iters", "40", "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));

    let text = std::fs::read_to_string(dir.path().join("trajectory_7.csv")).unwrap();
    assert_eq!(text.lines().count(), 41);
    let (header, rows) = read_csv(&dir.path().join("trajectory_7.csv"));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["iterations"], 40);
    for j in 0..2 {
        let c = column(&header, &format!("gp{}", j + 1));
        let sum: f64 = rows.iter().map(|r| r[c].parse::<f64>().unwrap().max(0.0)).sum();
        let reported = summary["violation_integrals"][j].as_f64().unwrap();
        assert!((sum - reported).abs() <= 1e-12 * (1.0 + sum.abs()), "gp{}: {sum} vs {reported}", j + 1);
    }
}

#[test]
fn csv_values_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario_path("static_ideal");
    let o = scfo(&["run", path.to_str().unwrap(), "--seed", "3", "--iters", "15", "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0));
    let mut cfg: ScenarioConfig = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    cfg.seed = 3;
    cfg.iterations = 15;
    let run = run_scenario(&cfg).unwrap();
    let (header, rows) = read_csv(&dir.path().join("trajectory_3.csv"));
    let (u1, cost) = (column(&header, "u1"), column(&header, "cost_true"));
    for (row, expected) in rows.iter().zip(&run.rows) {
        assert_eq!(row[u1].parse::<f64>().unwrap(), expected.u[0]);
        assert_eq!(row[cost].parse::<f64>().unwrap(), expected.cost_true);
        let mantissa = row[u1].trim_start_matches('-').split('e').next().unwrap().replace('.', "");
        assert_eq!(mantissa.len(), 17, "{}", row[u1]);
    }
}

#[test]
fn malformed_config_reports_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{ "plant": "static", "iterations": 10, "u0": [-0.35, 0.1], "delta_e": 0.02, "bogus": 1 }"#).unwrap();
    let o = scfo(&["run", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    let doc = stdout_json(&o);
    assert_eq!(doc["kind"], "validation");
    assert_eq!(doc["errors"][0]["field"], "config");
}

#[test]
fn out_of_range_values_are_all_listed() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{ "plant": "static", "iterations": 0, "u0": [2.0, 0.1], "delta_e": -1.0 }"#).unwrap();
    let o = scfo(&["run", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    let doc = stdout_json(&o);
    let fields: Vec<String> = doc["errors"].as_array().unwrap().iter().map(|e| e["field"].as_str().unwrap().to_string()).collect();
    for f in ["iterations", "u0", "delta_e"] {
        assert!(fields.iter().any(|x| x.starts_with(f)), "{f} missing from {fields:?}");
    }
    assert!(!dir.path().join("summary.json").exists());
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = scfo(&["run", dir.path().join("nope.json").to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stdout_json(&o)["kind"], "io");
}

#[test]
fn bad_sweep_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario_path("static_ideal");
    let o = scfo(&["run", cfg.to_str().unwrap(), "--sweep", "delta=1..3"], Some(dir.path()));
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout_json(&o)["errors"][0]["field"], "sweep");
}

#[test]
fn environment_overrides_output_directory() {
    let flag = tempfile::tempdir().unwrap();
    let env = tempfile::tempdir().unwrap();
    let cfg = scenario_path("static_ideal");
    let o = scfo(&["run", cfg.to_str().unwrap(), "--iters", "5", "--out", flag.path().to_str().unwrap()], Some(env.path()));
    assert_eq!(o.status.code(), Some(0));
    assert!(env.path().join("summary.json").exists());
    assert!(!flag.path().join("summary.json").exists());
}

#[test]
fn seed_sweep_writes_one_trajectory_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario_path("degrading_minus");
    let o = scfo(&["run", cfg.to_str().unwrap(), "--sweep", "seed=1..50", "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    for s in 1..=50 {
        assert!(dir.path().join(format!("trajectory_{s}.csv")).exists(), "seed {s}");
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let seeds: Vec<u64> = summary.as_array().unwrap().iter().map(|s| s["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, (1..=50).collect::<Vec<_>>());
}

#[test]
fn iteration_sweep_uses_subdirectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario_path("static_ideal");
    let o = scfo(&["run", cfg.to_str().unwrap(), "--sweep", "iters=3..4", "--seed", "2", "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0));
    for n in [3, 4] {
        let text = std::fs::read_to_string(dir.path().join(format!("iters_{n}/trajectory_2.csv"))).unwrap();
        assert_eq!(text.lines().count(), n + 1);
    }
}

#[test]
fn sweep_parsing() {
    assert_eq!(parse_sweep("seed=1..50").unwrap(), Sweep::Seed(1, 50));
    assert_eq!(parse_sweep(" iters = 10..10").unwrap(), Sweep::Iters(10, 10));
    for bad in ["seed", "seed=1..", "seed=5..1", "seed=a..b", "alpha=1..2", "seed=1-3"] {
        let e = parse_sweep(bad).unwrap_err();
        assert_eq!(e.field, "sweep", "{bad}");
    }
}
