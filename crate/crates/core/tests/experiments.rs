use std::fs;
use std::path::Path;
use std::process::Command;

use gaplab::experiments::{emit_results, run, EpsSchedule, ExperimentConfig, ExperimentKind, GridSize, Points};
use gaplab::Error;

fn gaplab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gaplab"))
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn repeated_local_gap_runs_are_byte_identical() {
    let cfg = ExperimentConfig::default_for(ExperimentKind::LocalGap);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_results(&run(&cfg).unwrap(), a.path()).unwrap();
    emit_results(&run(&cfg).unwrap(), b.path()).unwrap();
    for f in ["results.csv", "summary.json", "config.snapshot"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs");
    }
}

#[test]
fn small_sweep_records_every_point() {
    let mut cfg = ExperimentConfig::default_for(ExperimentKind::Sweep);
    cfg.eps = EpsSchedule { start: 1e-2, stop: 1e-3, count: 4 };
    cfg.sphere.coarse = GridSize::new(64, 32);
    cfg.sphere.fine = GridSize::new(128, 64);
    let rec = run(&cfg).unwrap();
    let Points::Sweep(points) = &rec.points else { panic!("sweep points expected") };
    assert_eq!(points.len(), 4);
    for p in points {
        assert!(p.accepted);
        assert!(p.u11_delta.is_finite() && p.gradient_delta.is_finite());
        assert!(p.fine.w_min_relative >= -1e-8);
    }
    let dir = tempfile::tempdir().unwrap();
    emit_results(&rec, dir.path()).unwrap();
    let csv = String::from_utf8(read(dir.path(), "results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(dir.path().join("fit_u11_n3.csv").exists());
}

#[test]
fn config_file_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    fs::write(&path, "[run]\nkind = sweep\n\n[eps]\nstart = 1e-2\nstop = oops\n").unwrap();
    match ExperimentConfig::load(&path) {
        Err(Error::Config { line, .. }) => assert_eq!(line, 6),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn cli_rates_writes_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = gaplab()
        .args(["--out", dir.path().to_str().unwrap(), "rates", "--n-min", "3", "--n-max", "8", "--k-max", "6"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(read(dir.path(), "rates.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "n,alpha,gradient_rate,beta_star,alpha_0,alpha_1,alpha_2,alpha_3,alpha_4,alpha_5,alpha_6");
    assert_eq!(lines.count(), 6);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS subsolution_threshold"));
}

#[test]
fn cli_h_certify_writes_profile() {
    let dir = tempfile::tempdir().unwrap();
    let out = gaplab()
        .args(["h-certify", "--n", "3", "--eps", "1e-3", "--beta", "auto", "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let profile = String::from_utf8(read(dir.path(), "h_profile.csv")).unwrap();
    assert!(profile.starts_with("r,h,r_alpha,lower_envelope,ratio\n"));
    let cert: serde_json::Value = serde_json::from_slice(&read(dir.path(), "h_certificate.json")).unwrap();
    assert_eq!(cert["bounds_hold"], true);
}

#[test]
fn cli_solve_dumps_grid_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = gaplab()
        .args(["--out", dir.path().to_str().unwrap(), "solve", "--n", "3", "--eps", "1e-2", "--grid", "32x16", "--dump-grid"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let grid = String::from_utf8(read(dir.path(), "grid.csv")).unwrap();
    assert!(grid.starts_with("i,j,sigma,tau,r,xn,cell_volume\n"));
    assert_eq!(grid.lines().count(), 1 + 32 * 16);
    let field = String::from_utf8(read(dir.path(), "field.csv")).unwrap();
    assert!(field.starts_with("i,j,r,xn,u,ur,un,amplitude\n"));
    let summary: serde_json::Value = serde_json::from_slice(&read(dir.path(), "summary.json")).unwrap();
    assert_eq!(summary["report"]["converged"], true);
}

#[test]
fn cli_rejects_config_for_another_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.cfg");
    fs::write(&cfg, ExperimentConfig::default_for(ExperimentKind::Sweep).emit()).unwrap();
    let out = gaplab().args(["--config", cfg.to_str().unwrap(), "mode-decay"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config is for `sweep`"));
}

#[test]
fn mode_decay_run_passes() {
    let rec = run(&ExperimentConfig::default_for(ExperimentKind::ModeDecay)).unwrap();
    assert!(rec.passed(), "{:?}", rec.failed_checks());
    assert_eq!(rec.points.len(), 2 * 5 * 2);
}
