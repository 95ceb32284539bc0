//! End-to-end tests of the `mftop` binary.

use mftop::cli::{smoothness_at_total, RunConfig, Summary, EXIT_CONFIG, EXIT_INFEASIBLE_INIT};
use mftop::flatness::{check_low_fidelity, VehicleParams, DEFAULT_CHECK_DT};
use mftop::optimizer::{read_history_csv, RunState};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mftop"));
    c.env_remove("MFTOP_SEED").env_remove("MFTOP_OUT");
    c
}

fn waypoints() -> Value {
    json!([
        {"x": 0.0, "y": 0.0, "z": 1.0, "yaw": 0.0},
        {"x": 2.0, "y": 0.0, "z": 1.0, "yaw": 0.0},
        {"x": 2.0, "y": 1.0, "z": 1.0, "yaw": 1.0}
    ])
}

/// Small simulator-only run: two iterations, three repetitions.
fn sim_only_config(out: &Path) -> Value {
    json!({
        "waypoints": "waypoints.json",
        "fidelity": "sim-only",
        "optimizer": {"iterations": 2, "acquisition": {"costs": [10.0], "thresholds": [0.4], "candidates": 40}},
        "out": out,
        "seed": 3
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    std::fs::write(dir.join("waypoints.json"), waypoints().to_string()).unwrap();
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn plan_writes_reparseable_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &sim_only_config(&out));
    let stdout = ok(bin().args(["plan", "--config"]).arg(&cfg).output().unwrap()).stdout;

    let summary: Value = serde_json::from_str(&read(&out.join("summary.json"))).unwrap();
    for key in ["T_star", "T_baseline", "improvement_pct"] {
        assert!(summary[key].is_number(), "missing {key}");
    }
    let printed: Summary = serde_json::from_slice(&stdout).unwrap();
    let typed: Summary = serde_json::from_value(summary).unwrap();
    assert_eq!(printed, typed);
    assert!(typed.t_star <= typed.t_baseline);
    assert!(typed.final_check.is_feasible());
    assert_eq!(typed.iterations, 2);

    let saved = RunConfig::from_json_str(&read(&out.join("config.json"))).unwrap();
    assert_eq!(RunConfig::from_json_str(&saved.to_json()).unwrap(), saved);
    let state = RunState::from_json(&read(&out.join("checkpoint.json"))).unwrap();
    assert_eq!(state.best, typed.best_allocation);
    let rows = read_history_csv(std::fs::File::open(out.join("history.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), state.history.len());
    let traj = csv::Reader::from_path(out.join("trajectory.csv"))
        .unwrap()
        .into_records()
        .count();
    assert!(traj > 10);
    let timing = csv::Reader::from_path(out.join("timing.csv"))
        .unwrap()
        .into_records()
        .count();
    assert_eq!(timing, state.init_records.len() + state.history.len());
}

#[test]
fn missing_waypoint_file_is_a_config_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &sim_only_config(&out));
    std::fs::remove_file(dir.path().join("waypoints.json")).unwrap();
    let res = bin().args(["plan", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(res.status.code(), Some(EXIT_CONFIG));
    assert!(!out.exists());
}

#[test]
fn unreachable_motor_limits_fail_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut c = sim_only_config(&out);
    c["vehicle"] = json!({"motor_speed_max": 300.0});
    let cfg = write_config(dir.path(), &c);
    let res = bin().args(["plan", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(
        res.status.code(),
        Some(EXIT_INFEASIBLE_INIT),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
}

#[test]
fn same_seed_gives_identical_summaries_and_env_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &sim_only_config(&dir.path().join("unused")));
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(bin()
            .args(["plan", "--config"])
            .arg(&cfg)
            .env("MFTOP_OUT", &out)
            .env("MFTOP_SEED", "11")
            .output()
            .unwrap());
        (
            read(&out.join("summary.json")),
            read(&out.join("history.csv")),
        )
    };
    let (a, ha) = run("a");
    let (b, hb) = run("b");
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    let s: Summary = serde_json::from_str(&a).unwrap();
    assert_eq!(s.seeds.master, 11);
    assert!(!dir.path().join("unused").exists());
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &sim_only_config(&dir.path().join("x")));
    let direct = dir.path().join("direct");
    ok(bin()
        .args(["plan", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&direct)
        .output()
        .unwrap());
    let split = dir.path().join("split");
    ok(bin()
        .args(["plan", "--iterations", "1", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&split)
        .output()
        .unwrap());
    ok(bin()
        .args(["plan", "--resume", "--iterations", "2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&split)
        .output()
        .unwrap());
    assert_eq!(
        read(&direct.join("history.csv")),
        read(&split.join("history.csv"))
    );
    assert_eq!(
        read(&direct.join("summary.json")),
        read(&split.join("summary.json"))
    );
}

#[test]
fn baseline_sits_on_the_oracle_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("base");
    let cfg = write_config(
        dir.path(),
        &json!({"waypoints": "waypoints.json", "out": out}),
    );
    ok(bin()
        .args(["baseline", "--config"])
        .arg(&cfg)
        .output()
        .unwrap());
    let base: Value = serde_json::from_str(&read(&out.join("baseline.json"))).unwrap();
    let flat = &base["levels"][0];
    assert_eq!(flat["name"], "flatness");
    let eta = flat["eta"].as_f64().unwrap();
    let ratio: Vec<f64> = serde_json::from_value(base["ratio"].clone()).unwrap();
    let loaded = RunConfig::load(&cfg, &Default::default()).unwrap();
    let problem = loaded.problem().unwrap();
    let check = |scale: f64| {
        let x: Vec<f64> = ratio.iter().map(|r| r * scale).collect();
        check_low_fidelity(
            &problem.trajectory(&x).unwrap(),
            &VehicleParams::default(),
            DEFAULT_CHECK_DT,
        )
        .unwrap()
        .is_feasible()
    };
    assert!(check(eta));
    assert!(!check(0.99 * eta));
    assert!(
        out.join("baseline_flatness.csv").exists() && out.join("baseline_simulation.csv").exists()
    );
}

#[test]
fn permissive_simulator_puts_the_baseline_at_the_lower_bound() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("base");
    let c = json!({
        "waypoints": "waypoints.json",
        "fidelity": "sim-only",
        "sim": {"error_bounds": {"max_position_error": 1e9, "max_yaw_error": 1e9}, "position_cap": 1e12, "speed_cap": 1e12},
        "out": out
    });
    let cfg = write_config(dir.path(), &c);
    let stdout = ok(bin()
        .args(["baseline", "--config"])
        .arg(&cfg)
        .output()
        .unwrap())
    .stdout;
    let base: Value = serde_json::from_slice(&stdout).unwrap();
    for level in base["levels"].as_array().unwrap() {
        assert!(
            (level["eta"].as_f64().unwrap() - 0.1).abs() < 1e-12,
            "{level}"
        );
    }
}

#[test]
fn report_rows_start_at_one_and_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &sim_only_config(&out));
    ok(bin().args(["plan", "--config"]).arg(&cfg).output().unwrap());
    ok(bin().args(["report", "--run"]).arg(&out).output().unwrap());
    assert!(out.join("report.gp").exists());
    let mut r = csv::Reader::from_path(out.join("report.csv")).unwrap();
    let rows: Vec<Vec<f64>> = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][2], 1.0);
    assert!((rows[0][3] - 1.0).abs() < 1e-12);
    assert!(rows.windows(2).all(|w| w[1][2] <= w[0][2]));

    let saved = RunConfig::from_json_str(&read(&out.join("config.json"))).unwrap();
    let problem = saved.problem().unwrap();
    let state = RunState::from_json(&read(&out.join("checkpoint.json"))).unwrap();
    let base_total = state.baseline_total();
    let base_sigma = smoothness_at_total(&problem, &state.baseline, base_total).unwrap();
    for row in &rows {
        let x = &row[4..];
        let sigma = smoothness_at_total(&problem, x, base_total).unwrap();
        assert!((row[3] - sigma / base_sigma).abs() <= 1e-9 * row[3].abs().max(1.0));
    }
}

#[test]
fn corrupt_run_directory_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.json"), "{").unwrap();
    let res = bin()
        .args(["report", "--run"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!res.status.success());
}

#[test]
fn eval_reports_each_level_and_writes_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &json!({"waypoints": "waypoints.json", "out": dir.path().join("o")}),
    );
    let trace = dir.path().join("trace.csv");
    let stdout = ok(bin()
        .args(["eval", "--allocation", "3.0,2.0", "--trace"])
        .arg(&trace)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap())
    .stdout;
    let report: Value = serde_json::from_slice(&stdout).unwrap();
    let levels = report["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 2);
    assert!(
        levels.iter().all(|l| l["label"]["label"] == "feasible"),
        "{report}"
    );
    let header = read(&trace).lines().next().unwrap().to_string();
    assert!(header.starts_with("t,ref_x"));

    let fast = ok(bin()
        .args(["eval", "--allocation", "0.3,0.2", "--config"])
        .arg(&cfg)
        .output()
        .unwrap())
    .stdout;
    let report: Value = serde_json::from_slice(&fast).unwrap();
    assert!(
        report["levels"]
            .as_array()
            .unwrap()
            .iter()
            .all(|l| l["label"]["label"] == "infeasible"),
        "{report}"
    );

    let wrong = bin()
        .args(["eval", "--allocation", "1.0", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(wrong.status.code(), Some(EXIT_CONFIG));
}
