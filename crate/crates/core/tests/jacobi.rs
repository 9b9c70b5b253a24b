use std::f64::consts::PI;

use thermoray_core::exprfield::parse;
use thermoray_core::flow::{simplicity_check, Fan, Record, State, ThermostatFlow};
use thermoray_core::grid::Domain;
use thermoray_core::jacobi::*;
use thermoray_core::random::rng;
use thermoray_core::surface::{ExternalField, IsothermalChart};

const SPHERE: &str = "log(2/(1+x^2+y^2))";
const HYPERBOLIC: &str = "log(2/(1-x^2-y^2))";

fn chart(rho: &str, radius: f64) -> IsothermalChart {
    IsothermalChart::new(Domain::Disk { radius }, parse(rho).unwrap(), 17, 17).unwrap()
}

fn field(e1: &str, e2: &str) -> ExternalField {
    ExternalField::new(parse(e1).unwrap(), parse(e2).unwrap())
}

fn flow(rho: &str, radius: f64, e: &ExternalField) -> ThermostatFlow {
    ThermostatFlow::new(&chart(rho, radius), e).unwrap()
}

#[test]
fn sphere_first_conjugate_time_is_pi() {
    let f = flow(SPHERE, 2.0, &ExternalField::zero());
    let scan = conjugate_scan(&f, 1.0, &Fan::new(16, 9)).unwrap();
    let times = scan.first_conjugate_times();
    assert!(times.len() > 20);
    for r in &scan.records {
        match r.first_conjugate {
            Some(t) => assert!((t - PI).abs() <= 1e-4, "{t}"),
            None => assert!(r.orbit_length <= PI + 1e-6),
        }
    }
}

#[test]
fn flat_and_nonpositive_curvature_scans_are_empty() {
    let flat = flow("0", 1.0, &ExternalField::zero());
    let hyperbolic = flow(HYPERBOLIC, 0.6, &ExternalField::zero());
    // 𝕂 = -div E = -0.3 on the flat disk
    let pushed = flow("0", 1.0, &field("0.2*x", "0.1*y"));
    for beta in [0.0, 0.5, 1.0, 4.0, 50.0] {
        for f in [&flat, &hyperbolic, &pushed] {
            assert!(conjugate_scan(f, beta, &Fan::new(8, 7)).unwrap().is_conjugate_free(), "β = {beta}");
        }
    }
}

#[test]
fn terminator_on_sphere_caps() {
    let radius: f64 = 0.5;
    let length = 4.0 * radius.atan();
    let oracle = (PI / length).powi(2);
    let est = terminator_estimate(&flow(SPHERE, radius, &ExternalField::zero()), &Fan::new(4, 9), 10.0, 1e-3).unwrap();
    assert!(!est.capped);
    assert!((est.beta_hat - oracle).abs() <= 0.02 * oracle, "{} vs {oracle}", est.beta_hat);
    assert!(est.beta_hat <= oracle + 1e-6);
}

#[test]
fn terminator_caps_and_trivial_search() {
    let hyperbolic = flow(HYPERBOLIC, 0.6, &ExternalField::zero());
    let est = terminator_estimate(&hyperbolic, &Fan::new(4, 5), 100.0, 1e-3).unwrap();
    assert!(est.capped && est.beta_hat == 100.0);
    let sphere = flow(SPHERE, 0.5, &ExternalField::zero());
    let est = terminator_estimate(&sphere, &Fan::new(4, 5), 0.0, 1e-3).unwrap();
    assert_eq!(est.beta_hat, 0.0);
}

#[test]
fn beta_one_scan_matches_linearised_flow() {
    let e = field("0.3*cos(y)", "0.2*x*y");
    let f = flow(SPHERE, 2.0, &e);
    let fan = Fan::new(8, 7);
    let scan = conjugate_scan(&f, 1.0, &fan).unwrap();
    let direct = conjugate_scan_direct(&f, &fan).unwrap();
    let mut compared = 0;
    for (r, d) in scan.records.iter().zip(&direct) {
        match (r.first_conjugate, d) {
            (Some(a), Some(b)) => {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
                compared += 1;
            }
            (None, None) => {}
            (a, b) => {
                // a conjugate point within a step of the exit is seen by only one route
                let t = a.or(*b).unwrap();
                assert!((r.orbit_length - t).abs() < 2e-3, "{a:?} vs {b:?}");
            }
        }
    }
    assert!(compared > 10);
}

#[test]
fn first_conjugate_time_decreases_in_beta() {
    let f = flow(SPHERE, 3.0, &ExternalField::zero());
    let orbit = f.integrate(State::new(-2.9, 0.0, 0.0), f.t_cap, Record::Full).unwrap();
    let coeffs = JacobiCoefficients::from_orbit(&orbit);
    let mut last = f64::INFINITY;
    for beta in [0.5, 1.0, 2.0, 4.0, 9.0] {
        let t = coeffs.solve(beta, 0.0, 1.0).unwrap().first_zero().unwrap();
        assert!((t - PI / f64::sqrt(beta)).abs() < 1e-6);
        assert!(t <= last);
        last = t;
    }
}

#[test]
fn wronskian_follows_v_lambda() {
    let e = field("0.4 + 0.2*y", "-0.3*x");
    let f = flow(SPHERE, 1.5, &e);
    for phi in [0.1, 1.3, 2.9] {
        let orbit = f.integrate(State::new(0.2, -0.1, phi), f.t_cap, Record::Full).unwrap();
        let coeffs = JacobiCoefficients::from_orbit(&orbit);
        assert!(coeffs.v_lambda.iter().any(|v| v.abs() > 0.1));
        for beta in [0.0, 1.0, 3.0] {
            assert!(wronskian_residual(&coeffs, beta).unwrap() <= 1e-6);
        }
    }
}

/// Time back to the circle of radius `r` along a straight line.
fn back_time(s: State, r: f64) -> f64 {
    let pv = s.x * s.phi.cos() + s.y * s.phi.sin();
    pv + (pv * pv - s.x * s.x - s.y * s.y + r * r).sqrt()
}

fn forward_time(s: State, r: f64) -> f64 {
    back_time(s.flipped(), r)
}

#[test]
fn flat_riccati_matches_entry_time() {
    let opts = RiccatiOptions { n: 9, nphi: 8, ..Default::default() };
    let sols = riccati_solutions(&chart("0", 1.0), &ExternalField::zero(), &opts).unwrap();
    let grid = &sols.plus.grid;
    let mut checked = 0;
    for (idx, x, y) in grid.points() {
        for j in 0..opts.nphi {
            let s = State::new(x, y, 2.0 * PI * j as f64 / opts.nphi as f64);
            let plus = sols.plus.at_node(idx, j);
            if plus.is_nan() {
                continue;
            }
            assert!((plus - 1.0 / back_time(s, 1.2)).abs() <= 1e-4);
            assert!((sols.minus.at_node(idx, j) + 1.0 / forward_time(s, 1.1)).abs() <= 1e-4);
            checked += 1;
        }
    }
    assert!(checked > 300);
    assert!(sols.min_separation > 0.0);
}

#[test]
fn riccati_residual_along_probes() {
    for (rho, radius, e) in [("0", 1.0, field("0.1*x", "0.05*y")), (SPHERE, 0.5, field("0.1", "0.1*x"))] {
        let solver = RiccatiSolver::new(&chart(rho, radius), &e, Nesting::default(), 1.0, None).unwrap();
        let res = riccati_residual(&solver, 100, 2, 1e-3, &mut rng(11)).unwrap();
        assert_eq!(res.points, 200);
        assert!(res.plus_sup <= 5e-3 && res.minus_sup <= 5e-3, "{res:?}");
    }
}

#[test]
fn riccati_solutions_separate_on_simple_configs() {
    let fan = Fan::new(8, 5);
    for (rho, radius, e) in [("0", 1.0, field("0.1*x", "0.05*y")), (SPHERE, 0.5, ExternalField::zero())] {
        let c = chart(rho, radius);
        assert!(simplicity_check(&c, &e, &fan).unwrap().simple);
        let opts = RiccatiOptions { n: 9, nphi: 8, simplicity_fan: Some(fan), ..Default::default() };
        let sols = riccati_solutions(&c, &e, &opts).unwrap();
        assert!(sols.min_separation > 0.0);
        let v = sols.plus.interpolate(0.1 * radius, -0.2 * radius, 0.7).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }
}

#[test]
fn simplicity_examples() {
    let fan = Fan::new(16, 9);
    let flat = simplicity_check(&chart("0", 1.0), &ExternalField::zero(), &fan).unwrap();
    assert!(flat.simple && flat.conjugate_free && flat.not_exited == 0);
    assert!((flat.convexity.margin - 1.0).abs() < 1e-12);
    let sphere = simplicity_check(&chart(SPHERE, 1.0), &ExternalField::zero(), &fan).unwrap();
    assert!(!sphere.strictly_convex && !sphere.simple);
    assert!(sphere.convexity.margin.abs() < 1e-12);
    let pushed = simplicity_check(&chart("0", 1.0), &field("2", "0"), &fan).unwrap();
    assert!(pushed.convexity.margin < 0.0 && !pushed.simple);
}

#[test]
fn alpha_certificates() {
    let opts = AlphaOptions { fan: Fan::new(8, 5), n: 21, nphi: 24, trials: 50, ..Default::default() };
    let sphere = chart(SPHERE, 0.5);
    let one = alpha_certificate(&sphere, &ExternalField::zero(), 1.0, &opts).unwrap();
    assert_eq!(one.alpha, 0.0);
    assert!(one.identity_pass && one.empirical_pass, "{one:?}");
    let two = alpha_certificate(&sphere, &ExternalField::zero(), 2.0, &opts).unwrap();
    assert_eq!(two.alpha, 0.5);
    assert!(two.identity_residual <= 1e-2 && two.empirical_pass && two.alpha_estimate > 0.0, "{two:?}");
    // past the terminator value the premise fails
    assert!(matches!(
        alpha_certificate(&sphere, &ExternalField::zero(), 4.0, &opts),
        Err(JacobiError::ConjugatePoint { .. })
    ));
    assert!(matches!(alpha_certificate(&sphere, &ExternalField::zero(), 0.5, &opts), Err(JacobiError::Hypothesis(_))));
    // 𝕂 ≤ 0: large β gives α close to 1 and the α = 1 inequality holds directly
    let hyperbolic = alpha_certificate(&chart(HYPERBOLIC, 0.6), &ExternalField::zero(), 1e4, &opts).unwrap();
    assert!((hyperbolic.alpha - 1.0).abs() < 1e-3 && hyperbolic.empirical_pass);
    assert!(hyperbolic.alpha_estimate > 0.0);
}
