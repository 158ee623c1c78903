mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cmflq::scenarios::{builtin, load_scenario};
use common::fixture;

fn cmflq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmflq")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn fixtures_match_builtins() {
    for (file, name) in [("example_1d.json", "example-1d"), ("machines.json", "machines")] {
        let text = fs::read_to_string(fixture(file)).unwrap();
        assert_eq!(load_scenario(&text).unwrap(), builtin(name).unwrap());
    }
}

#[test]
fn validate_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&cmflq(tmp.path(), &["validate", "--scenario", "example-1d"])), 0);
    assert_eq!(code(&cmflq(tmp.path(), &["validate", "--scenario", "machines"])), 0);

    let r_zero = cmflq(tmp.path(), &["validate", "--json", "--config", fixture("r_zero.json").to_str().unwrap()]);
    assert_eq!(code(&r_zero), 1);
    let report: serde_json::Value = serde_json::from_slice(&r_zero.stdout).unwrap();
    assert_eq!(report["passes"], false);
    let v = &report["violations"][0];
    assert_eq!(v["assumption"], "A3");
    assert!(v["detail"].as_str().unwrap().contains("delta2"));

    assert_eq!(code(&cmflq(tmp.path(), &["validate", "--config", fixture("malformed.json").to_str().unwrap()])), 2);
    assert_eq!(code(&cmflq(tmp.path(), &["validate", "--scenario", "nope"])), 2);
    assert_eq!(code(&cmflq(tmp.path(), &["validate"])), 2);
    assert_eq!(code(&cmflq(tmp.path(), &["frobnicate"])), 2);
}

#[test]
fn solve_writes_long_format_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cmflq(tmp.path(), &["solve", "--scenario", "example-1d", "--dt", "0.01", "--out", "gains"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["lambda", "gamma", "phi"] {
        let text = fs::read_to_string(tmp.path().join("gains").join(format!("{name}.csv"))).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * 5001);
        assert_eq!(lines[0], format!("t,regime,{name}_1{}", if name == "phi" { "" } else { "_1" }));
        assert!(lines[1].starts_with("0,1,"));
        assert!(lines[5002].starts_with("0,2,"));
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("gains/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "solve");
    assert_eq!(manifest["step"], 0.01);
    assert!(manifest.get("timestamp").is_none());
}

#[test]
fn zero_cost_problem_has_zero_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture("zero_cost.json");
    let o = cmflq(tmp.path(), &["solve", "--config", cfg.to_str().unwrap(), "--dt", "0.01", "--out", "z"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["lambda", "gamma", "phi"] {
        let text = fs::read_to_string(tmp.path().join("z").join(format!("{name}.csv"))).unwrap();
        for line in text.lines().skip(1) {
            let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
            assert_eq!(v, 0.0);
        }
    }
}

#[test]
fn simulate_writes_declared_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cmflq(
        tmp.path(),
        &["simulate", "--scenario", "example-1d", "--paths", "1", "--noise", "1", "--seed", "3", "--out", "sim"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(tmp.path().join("sim/trajectory_0000.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,regime,X_1,Xhat_1,m_1,err_1,u_1,ubar_1,V_1,Y_1,running_cost");
    assert_eq!(lines.count(), 5001);
    let chain = fs::read_to_string(tmp.path().join("sim/chain_path_0000.csv")).unwrap();
    assert_eq!(chain.lines().next().unwrap(), "jump_time,new_regime");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("sim/cost_report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["seed"], 3);
    assert_eq!(report["report"]["chain_paths"], 1);
    assert!(report["report"]["v_p_theory"]["mean"].is_number());
}

#[test]
fn uncontrolled_simulation_has_zero_controls() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cmflq(
        tmp.path(),
        &["simulate", "--scenario", "example-1d", "--paths", "2", "--noise", "1", "--no-control", "--out", "free"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(tmp.path().join("free/trajectory_0000.csv")).unwrap();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!((cols[6], cols[7]), ("0", "0"));
    }
}
