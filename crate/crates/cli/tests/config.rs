use std::f64::consts::PI;

use thermoray_cli::config::ExperimentConfig;
use thermoray_core::grid::Domain;

const TORUS: &str = r#"{"seed": 5, "chart": {"kind": "torus", "L": "2*pi", "rho": "0.1*sin(x)", "Nx": 16, "Ny": 16}}"#;

#[test]
fn defaults_and_constant_expressions() {
    let cfg = ExperimentConfig::from_json(TORUS).unwrap();
    assert_eq!(cfg.generator, "chacha8");
    assert_eq!(cfg.chart.nphi, 33);
    assert_eq!(cfg.fiber_kmax(), 16);
    match cfg.domain().unwrap() {
        Domain::Torus { length } => assert!((length - 2.0 * PI).abs() < 1e-15),
        d => panic!("{d:?}"),
    }
    assert!(cfg.field().unwrap().e1.is_zero());
}

#[test]
fn hash_tracks_the_effective_config() {
    let a = ExperimentConfig::from_json(TORUS).unwrap();
    let b = ExperimentConfig::from_json(&TORUS.replace("\"seed\": 5,", "\"seed\": 5, ")).unwrap();
    assert_eq!(a.hash(), b.hash());
    let mut c = a.clone();
    c.seed = 6;
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), "sha256:".len() + 64);
}

#[test]
fn chart_keys_must_match_the_kind() {
    let disk_with_l = r#"{"chart": {"kind": "disk", "L": 1.0, "Nx": 16, "Ny": 16}}"#;
    assert_eq!(ExperimentConfig::from_json(disk_with_l).unwrap_err().exit_code(), 2);
    let torus_with_r = r#"{"chart": {"kind": "torus", "R": 1.0, "Nx": 16, "Ny": 16}}"#;
    assert_eq!(ExperimentConfig::from_json(torus_with_r).unwrap_err().exit_code(), 2);
    let negative = r#"{"chart": {"kind": "disk", "R": -1.0, "Nx": 16, "Ny": 16}}"#;
    assert!(ExperimentConfig::from_json(negative).is_err());
}
