use std::path::Path;
use std::process::{Command, Output};

fn epiwave(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epiwave"))
        .args(args)
        .env_remove("EPIWAVE_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small supercritical run: front stays well inside the grid.
const SMALL: [&str; 6] = [
    "--override",
    "grid.t_end=10",
    "--override",
    "grid.half_width=60",
    "--override",
    "grid.dx=0.1",
];

#[test]
fn r0_reports_default_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = epiwave(&["r0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let value = |key: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(key)).unwrap();
        line.split('=').nth(1).unwrap().trim().parse().unwrap()
    };
    assert!((value("R0") - 2.0).abs() < 1e-8);
    assert!((value("rho*") - 0.796812).abs() < 1e-6);
    let meta = json(&dir.path().join("r0.json"));
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(meta["command"], "r0");
}

#[test]
fn trivial_simulation_writes_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let out = epiwave(&[
        "simulate",
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "init.source.kind=\"zero\"",
        "--override",
        "grid.t_end=2",
        "--override",
        "grid.half_width=20",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("trivial dynamics"));
    let phi = std::fs::read_to_string(dir.path().join("phi.csv")).unwrap();
    for line in phi.lines().skip(1) {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(v, 0.0);
    }
    assert!(json(&dir.path().join("simulate.json"))["result"]["trivial"].as_bool().unwrap());
}

#[test]
fn outputs_are_deterministic_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut args = vec!["simulate", "--threads", "1", "--out", a.path().to_str().unwrap()];
    args.extend(SMALL);
    assert_eq!(epiwave(&args).status.code(), Some(0));
    let mut args = vec!["simulate", "--threads", "2", "--out", b.path().to_str().unwrap()];
    args.extend(SMALL);
    assert_eq!(epiwave(&args).status.code(), Some(0));
    for f in ["phi.csv", "rho_step0000500.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn config_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = epiwave(&["config", "--override", "rates.tau0=3", "--override", "kernel.preset=\"laplace\"", "--override", "kernel.b=0.5"]);
    assert_eq!(out.status.code(), Some(0));
    let first = stdout(&out);
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, &first).unwrap();
    let again = epiwave(&["config", "--config", path.to_str().unwrap()]);
    assert_eq!(stdout(&again), first);
}

#[test]
fn exit_codes() {
    // Unknown preset: config error.
    assert_eq!(epiwave(&["r0", "--override", "kernel.preset=\"cauchy\""]).status.code(), Some(2));
    assert_eq!(epiwave(&["r0", "--override", "grid.dx=-1"]).status.code(), Some(2));
    // R0 ≤ 1 passed to dispersion.
    let dir = tempfile::tempdir().unwrap();
    let out = epiwave(&["dispersion", "--out", dir.path().to_str().unwrap(), "--override", "rates.tau0=0.5"]);
    assert_eq!(out.status.code(), Some(2));
    // Front runs into the edge of a small grid: numerical failure.
    let out = epiwave(&[
        "simulate",
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "grid.half_width=15",
        "--override",
        "grid.t_end=15",
        "--override",
        "grid.dx=0.1",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn spread_report_close_to_c_star() {
    let dir = tempfile::tempdir().unwrap();
    let out = epiwave(&[
        "spread",
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "grid.t_end=40",
        "--override",
        "grid.half_width=120",
        "--override",
        "grid.dx=0.1",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let meta = json(&dir.path().join("spread.json"));
    let fronts = meta["result"]["fronts"].as_array().unwrap();
    assert_eq!(fronts.len(), 3);
    for f in fronts {
        assert!(f["relative_error"].as_f64().unwrap().abs() < 0.05, "{f}");
    }
    assert!(dir.path().join("front_l0.5.csv").exists());
    assert!(meta["result"]["longtime"]["sup_discrepancy"].as_f64().unwrap() < 1e-2);
}

#[test]
fn wave_profile_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = epiwave(&[
        "wave",
        "--out",
        dir.path().to_str().unwrap(),
        "--speed",
        "4.4",
        "--override",
        "wave.half_width=80",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let meta = json(&dir.path().join("wave.json"));
    let p = &meta["result"]["profiles"][0];
    assert!(p["residual"].as_f64().unwrap() < 1e-8);
    let csv = std::fs::read_to_string(dir.path().join("wave_0.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "z,chi,sub,super");
}
