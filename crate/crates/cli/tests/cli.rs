use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pstomo::dde::read_distributions_csv;
use pstomo::geometry::PointSourceModel;
use pstomo::projector::{LineSource, ProjectionSet};
use pstomo::udgp::RecoveryReport;

fn pstomo(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pstomo"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn verbs_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&pstomo(&["simulate", "--k", "3", "--m-bins", "80", "--snr", "inf", "--lines", "1500", "--seed", "4", "--out", "sim"], d));
    let model = PointSourceModel::load(&d.join("sim/model.json")).unwrap();
    let data = ProjectionSet::load(&d.join("sim/projections.bin")).unwrap();
    assert_eq!(model.len(), 3);
    assert_eq!((data.line_count(), data.half_bins()), (1500, 80));

    let csv = ok(&pstomo(&["features", "--projections", "sim/projections.bin", "--k", "3", "--model", "sim/model.json"], d));
    assert!(csv.lines().count() > 50);

    let json = ok(&pstomo(&["pbde", "--projections", "sim/projections.bin", "--k", "3", "--model", "sim/model.json"], d));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["radial"]["distances"].as_array().unwrap().len(), 3);
    assert!(v["radial_error"].as_f64().unwrap() < 0.05);

    ok(&pstomo(
        &["dde", "--projections", "sim/projections.bin", "--k", "3", "--model", "sim/model.json", "--out", "dist.csv"],
        d,
    ));
    let (radial, pairwise) = read_distributions_csv(&fs::read_to_string(d.join("dist.csv")).unwrap()).unwrap();
    assert_eq!(radial.mass().len(), 256);
    assert!(pairwise.is_some());

    ok(&pstomo(
        &["recover", "--distributions", "dist.csv", "--k", "3", "--grid", "17", "--model", "sim/model.json", "--out", "rec.json"],
        d,
    ));
    let report: RecoveryReport = serde_json::from_str(&fs::read_to_string(d.join("rec.json")).unwrap()).unwrap();
    assert_eq!(report.locations.len(), 3);
    assert!(report.emd_pairwise.is_some());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        vec!["table-pbde", "--trials", "0"],
        vec!["table-recovery", "--k", "1"],
        vec!["single", "--lines", "0"],
        vec!["single", "--k", "2,3"],
        vec!["simulate", "--snr", "-1"],
        vec!["pbde", "--projections", "missing.bin", "--k", "2"],
        vec!["no-such-verb"],
    ] {
        let out = pstomo(&args, d);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    fs::write(d.join("bad.json"), r#"{"trials": 3, "tirals": 4}"#).unwrap();
    let out = pstomo(&["table-pbde", "--config", "bad.json"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tirals"));
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("flat.csv"), "u,p_mu,p_c\n0,0,0\n0.5,0,0\n1,0,0\n").unwrap();
    let out = pstomo(&["recover", "--distributions", "flat.csv", "--k", "2"], d);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn table_config_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("cfg.json"),
        r#"{"ks": [2], "half_bins": [40], "snrs": ["inf", 10], "trials": 4, "knobs": {"lines": 300}}"#,
    )
    .unwrap();
    let summary = ok(&pstomo(&["table-pbde", "--config", "cfg.json", "--seed", "7", "--run-id", "r", "--jobs", "2"], d));
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("2,40,inf,4,"));
    assert!(lines[2].starts_with("2,40,10,4,"));
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("runs/r/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["knobs"]["lines"], 300);
    assert_eq!(fs::read_dir(d.join("runs/r/cells")).unwrap().count(), 2);

    let again = ok(&pstomo(&["table-pbde", "--config", "cfg.json", "--seed", "7", "--run-id", "r"], d));
    assert_eq!(again, summary);
    let clash = pstomo(&["table-pbde", "--config", "cfg.json", "--seed", "8", "--run-id", "r"], d);
    assert_eq!(clash.status.code(), Some(2));
}
