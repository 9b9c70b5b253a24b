use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn thermoray(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thermoray"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

fn report(dir: &Path, command: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(format!("{command}.json"))).unwrap()).unwrap()
}

#[test]
fn verify_passes_on_the_flat_torus() {
    let dir = tempfile::tempdir().unwrap();
    let out = thermoray(&["verify"], &config("flat_torus.json"), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let r = report(dir.path(), "verify");
    assert_eq!(r["tool"], "thermoray");
    assert_eq!(r["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(r["generator"], "chacha8");
    assert!(r["config_hash"].as_str().unwrap().starts_with("sha256:"));
    assert_eq!(r["pass"], true);
    let artifacts = r["artifacts"].as_array().unwrap();
    assert!(artifacts.iter().any(|a| a["file"] == "identities.csv"));
}

#[test]
fn tight_tolerances_fail_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = thermoray(&["verify", "--tolerance-scale", "1e-30"], &config("flat_torus.json"), dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(report(dir.path(), "verify")["pass"], false);
}

#[test]
fn parse_errors_point_at_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = thermoray(&["orbit"], &config("bad.json"), dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("rho") && err.contains("x +") && err.contains('^'), "{err}");
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for text in [
        r#"{"chart":{"kind":"disk","R":1.0,"Nx":17,"Ny":17},"typo":1}"#,
        r#"{"chart":{"kind":"disk","R":1.0,"Nx":17,"Ny":17,"Nphi":32}}"#,
        r#"{"generator":"pcg","chart":{"kind":"disk","R":1.0,"Nx":17,"Ny":17}}"#,
        r#"{"chart":{"kind":"torus","L":"x","Nx":16,"Ny":16}}"#,
        "not json",
    ] {
        let path = write_config(dir.path(), text);
        let out = thermoray(&["orbit"], &path, &dir.path().join("out"));
        assert_eq!(out.status.code(), Some(2), "{text}");
    }
    let out = thermoray(&["no-such-command"], &config("flat_torus.json"), dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn hypothesis_violations_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = thermoray(&["invert"], &config("flat_torus.json"), dir.path());
    assert_eq!(out.status.code(), Some(3));
    let out = thermoray(&["normalize-curvature"], &config("thermostat_disk.json"), dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn numerical_failures_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(
        dir.path(),
        r#"{"chart":{"kind":"disk","R":1.0,"Nx":17,"Ny":17},"fan":{"n_boundary":24,"n_angles":12},
            "experiment":{"m":0,"basis_degree":20}}"#,
    );
    let out = thermoray(&["kernel"], &path, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn unthresholded_demos_exit_0() {
    let dir = tempfile::tempdir().unwrap();
    let out = thermoray(&["terminator"], &config("neg_curv_disk.json"), dir.path());
    assert_eq!(out.status.code(), Some(0));
    let r = report(dir.path(), "terminator");
    assert_eq!(r["result"]["capped"], true);
    assert!(r["checks"].as_array().unwrap().is_empty());
    assert!(dir.path().join("terminator_estimate.json").exists());
}

#[test]
fn seed_and_threads_flags() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let cfg = config("thermostat_disk.json");
    assert_eq!(thermoray(&["riccati", "--threads", "1"], &cfg, a.path()).status.code(), Some(0));
    assert_eq!(thermoray(&["riccati", "--threads", "3"], &cfg, b.path()).status.code(), Some(0));
    assert_eq!(fs::read(a.path().join("riccati.json")).unwrap(), fs::read(b.path().join("riccati.json")).unwrap());
    assert_eq!(thermoray(&["riccati", "--seed", "99"], &cfg, c.path()).status.code(), Some(0));
    let (ra, rc) = (report(a.path(), "riccati"), report(c.path(), "riccati"));
    assert_eq!(rc["seed"], 99);
    assert_ne!(ra["config_hash"], rc["config_hash"]);
}
