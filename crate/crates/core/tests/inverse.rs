use std::f64::consts::PI;

use num_complex::Complex64 as C;
use proptest::prelude::*;
use thermoray_core::exprfield::parse;
use thermoray_core::flow::{Fan, ThermostatFlow};
use thermoray_core::grid::Domain;
use thermoray_core::inverse::*;
use thermoray_core::phase::{PhaseFunction, ThermostatFrame};
use thermoray_core::random::{rng, PhaseSpec};
use thermoray_core::surface::{ExternalField, IsothermalChart};
use thermoray_core::xray::*;

const TORUS: Domain = Domain::Torus { length: 2.0 * PI };
const KINDS: [OperatorKind; 5] =
    [OperatorKind::P, OperatorKind::PAdjoint, OperatorKind::T, OperatorKind::Q, OperatorKind::QAdjoint];

fn field(e1: &str, e2: &str) -> ExternalField {
    ExternalField::new(parse(e1).unwrap(), parse(e2).unwrap())
}

fn torus_frame(n: usize, rho: &str, e: &ExternalField) -> ThermostatFrame {
    ThermostatFrame::new(&IsothermalChart::new(TORUS, parse(rho).unwrap(), n, n).unwrap(), e).unwrap()
}

fn generic_frame(n: usize) -> ThermostatFrame {
    torus_frame(n, "0.2*cos(x) + 0.1*sin(y)", &field("0.1*sin(y)", "0.05*cos(x)"))
}

fn random(frame: &ThermostatFrame, seed: u64, ks: &[i32]) -> PhaseFunction {
    PhaseSpec::random(&mut rng(seed), TORUS, ks, 3, 1.0).realified().sample(&frame.grid)
}

#[test]
fn operator_adjoints() {
    let frame = generic_frame(24);
    let u = random(&frame, 1, &[-3, -1, 0, 2, 3]);
    let v = random(&frame, 2, &[-2, 1, 2, 4]);
    for m in 1..=3 {
        let ops = build_operators(&frame, m);
        for kind in KINDS {
            assert!(ops.adjoint_residual(kind, &u, &v).unwrap() <= 1e-8, "{} m = {m}", kind.name());
            assert_eq!(kind.adjoint().adjoint(), kind);
        }
    }
}

#[test]
fn operators_on_simple_inputs() {
    let frame = generic_frame(16);
    let ops = build_operators(&frame, 1);
    let one = PhaseFunction::constant(frame.grid.clone(), C::new(1.0, 0.0));
    assert_eq!(ops.p(&one).unwrap().sup_norm(), 0.0);
    let low = random(&frame, 3, &[-1, 0, 1]);
    assert_eq!(ops.t(&low).sup_norm(), 0.0);
    let high = random(&frame, 4, &[-3, 2]);
    assert_eq!(ops.t(&high).sub(&high).unwrap().sup_norm(), 0.0);
}

#[test]
fn control_constants() {
    let frame = generic_frame(16);
    let cc = estimate_control_constants(&frame, 2, 30, 2, &mut rng(9)).unwrap();
    assert_eq!(cc.label, "empirical lower bound");
    assert!(cc.c_p.is_finite() && cc.c_p > 0.0 && cc.c_q.is_finite() && cc.c_q > 0.0, "{cc:?}");
    let ops = build_operators(&frame, 2);
    let one = PhaseFunction::constant(frame.grid.clone(), C::new(1.0, 0.0));
    assert!(matches!(p_control_ratio(&ops, &one), Err(InverseError::Hypothesis(_))));
    let u = random(&frame, 5, &[-2, 1, 3]);
    assert!(p_control_ratio(&ops, &u).unwrap().unwrap() > 0.0);
}

#[test]
fn invariant_function_trivial_cases() {
    let frame = torus_frame(16, "0.2*cos(x)", &ExternalField::zero());
    let f = vec![1.5; frame.grid.len()];
    let a = PhaseFunction::zero(frame.grid.clone(), 0);
    let res = construct_invariant_function(&frame, &f, &a, &CgOptions::default()).unwrap();
    assert_eq!(res.h.sup_norm(), 0.0);
    assert!(res.w0_exact && res.invariance_residual == 0.0 && res.solver.converged);
    let bad = PhaseFunction::constant(frame.grid.clone(), C::new(1.0, 0.0));
    assert!(matches!(
        construct_invariant_function(&frame, &f, &bad, &CgOptions::default()),
        Err(InverseError::Hypothesis(_))
    ));
}

#[test]
fn invariant_function_keeps_f() {
    let frame = generic_frame(16);
    let f: Vec<f64> = frame.grid.points().map(|(_, x, y)| x.cos() + 0.2 * y.sin()).collect();
    let a = random(&frame, 6, &[-2, 2]);
    let opts = CgOptions { kmax: 4, max_iter: Some(150), ..CgOptions::default() };
    let res = construct_invariant_function(&frame, &f, &a, &opts).unwrap();
    assert!(res.w0_exact);
    assert_eq!(res.solver.operator, "P*");
    assert!(res.solver.iterations > 0 && res.solver.residual.is_finite());
    assert!(res.solver.residual < res.solver.rhs_norm);
    assert!((res.invariance_residual - res.solver.residual).abs() <= 1e-8 * res.solver.rhs_norm);
}

#[test]
fn solenoidal_projection() {
    let frame = generic_frame(32);
    let g = &frame.grid;
    let solenoidal = OneForm::from_exprs(g, &parse("cos(y)").unwrap(), &parse("sin(x)").unwrap()).unwrap();
    assert!(solenoidality_residual(&frame, &solenoidal).unwrap() <= 1e-10);
    let same = solenoidal_project(&frame, &solenoidal).unwrap();
    assert!(same.sub(&solenoidal).sup_norm() <= 1e-12);
    let psi: Vec<f64> = g.points().map(|(_, x, y)| (x + 2.0 * y).sin() + 0.3 * x.cos()).collect();
    let exact = OneForm::exact(g, &psi);
    assert!(solenoidality_residual(&frame, &exact).unwrap() > 0.1);
    assert!(solenoidal_project(&frame, &exact).unwrap().sup_norm() <= 1e-8 * exact.sup_norm());
    let mixed =
        OneForm::from_exprs(g, &parse("cos(y) + 0.3*sin(x+y) + sin(x)").unwrap(), &parse("sin(x)*cos(y)").unwrap())
            .unwrap();
    assert!(solenoidality_residual(&frame, &solenoidal_project(&frame, &mixed).unwrap()).unwrap() <= 1e-8);
    assert!(matches!(
        construct_invariant_oneform(&frame, &mixed, &CgOptions::default()),
        Err(InverseError::Hypothesis(_))
    ));
}

#[test]
fn invariant_oneform() {
    let frame = generic_frame(16);
    let zero = construct_invariant_oneform(&frame, &OneForm::zero(&frame.grid), &CgOptions::default()).unwrap();
    assert_eq!(zero.w.sup_norm(), 0.0);
    let alpha = OneForm::from_exprs(
        &frame.grid,
        &parse("cos(y) + 0.3*sin(x+y)").unwrap(),
        &parse("sin(x) - 0.3*sin(x+y)").unwrap(),
    )
    .unwrap();
    let alpha = solenoidal_project(&frame, &alpha).unwrap();
    let opts = CgOptions { kmax: 4, max_iter: Some(150), ..CgOptions::default() };
    let res = construct_invariant_oneform(&frame, &alpha, &opts).unwrap();
    assert!(res.a0 <= 1e-10, "{}", res.a0);
    assert!(res.modes_exact);
    assert!(res.solver.residual < res.solver.rhs_norm);
    assert_eq!(res.w.mode(0).map(|m| m.iter().all(|c| c.norm() == 0.0)), Some(true));
}

#[test]
fn curvature_cancelling_field() {
    let rho = parse("0.3*cos(x) + 0.2*sin(2*y)").unwrap();
    let chart = IsothermalChart::new(TORUS, rho.clone(), 32, 32).unwrap();
    let frame = ThermostatFrame::new(&chart, &ExternalField::curvature_cancelling(&rho)).unwrap();
    assert!(frame.thermostat_curvature.iter().all(|k| k.abs() <= 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn q_bound_with_vanishing_curvature(m in 1usize..4, seed in 0u64..10_000) {
        let rho = parse("0.3*cos(x) + 0.2*sin(2*y)").unwrap();
        let chart = IsothermalChart::new(TORUS, rho.clone(), 24, 24).unwrap();
        let frame = ThermostatFrame::new(&chart, &ExternalField::curvature_cancelling(&rho)).unwrap();
        let mi = m as i32;
        let u = PhaseSpec::random(&mut rng(seed), TORUS, &[mi, mi + 1, mi + 2, -mi, -mi - 1], 3, 1.0).sample(&frame.grid);
        let bound = q_lower_bound(&frame, &u, m, 1.0).unwrap();
        prop_assert!(bound.pass, "{:?}", bound);
    }

    #[test]
    fn adjoint_pairs_on_random_inputs(seed in 0u64..10_000, m in 1usize..4) {
        let frame = generic_frame(16);
        let u = random(&frame, seed, &[-2, 0, 1, 3]);
        let v = random(&frame, seed + 1, &[-3, -1, 2]);
        let ops = build_operators(&frame, m);
        for kind in KINDS {
            prop_assert!(ops.adjoint_residual(kind, &u, &v).unwrap() <= 1e-8);
        }
    }
}

#[test]
fn q_bound_rejects_low_modes() {
    let frame = generic_frame(16);
    let u = random(&frame, 7, &[0, 2]);
    assert!(matches!(q_lower_bound(&frame, &u, 1, 1.0), Err(InverseError::Hypothesis(_))));
}

fn disk_problem(m: usize) -> (IsothermalChart, ExternalField, ThermostatFlow, TensorProblem) {
    let chart = IsothermalChart::new(Domain::Disk { radius: 1.0 }, parse("0").unwrap(), 17, 17).unwrap();
    let e = field("0.1*x", "0.1*y");
    let flow = ThermostatFlow::new(&chart, &e).unwrap();
    let mut o = KernelOptions::new(m);
    o.fan = Fan::new(24, 12);
    let problem = TensorProblem::assemble(&flow, &o).unwrap();
    (chart, e, flow, problem)
}

#[test]
fn recovers_a_function_phantom() {
    let (_, _, flow, problem) = disk_problem(0);
    let truth = SymmetricTensor::function(parse("1 + 0.5*x - 0.3*y^2 + 0.2*x*y").unwrap());
    let data = ray_transform(&flow, &truth, &problem.options.fan).unwrap();
    let (rec, estimate) = recover_tensor(&problem, &data, None, Some(&truth)).unwrap();
    assert!(rec.relative_error.unwrap() <= 0.05, "{rec:?}");
    assert!(rec.data_residual <= 1e-4);
    assert!((rec.coefficients[0] - 1.0).abs() < 1e-3);
    assert_eq!(estimate.order(), 0);
    let mut csv = Vec::new();
    write_coefficients_csv(&problem.options.basis, &rec.coefficients, &mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + problem.options.basis.len());
    let (damped, _) = recover_tensor(&problem, &data, Some(1e12 * rec.sigma_max * rec.sigma_max), None).unwrap();
    assert!(damped.estimate_norm <= 1e-9 * rec.estimate_norm);
}

#[test]
fn potential_data_gives_no_solenoidal_part() {
    let (chart, e, flow, problem) = disk_problem(1);
    let h = boundary_vanishing_tensor(0, 0, 1, 0, 1.0);
    let integrand = PotentialIntegrand::new(&chart, &e, &[&h]);
    let data = ray_transform_of(&flow, &integrand, &problem.options.fan).unwrap();
    let (rec, _) = recover_tensor(&problem, &data, None, None).unwrap();
    let scale = problem.samples.matrix(&integrand).unwrap().norm();
    assert!(rec.solenoidal_norm <= 1e-3 * scale, "{} vs {scale}", rec.solenoidal_norm);
    let other = ray_transform(&flow, &SymmetricTensor::zero(1), &Fan::new(4, 3)).unwrap();
    assert!(matches!(recover_tensor(&problem, &other, None, None), Err(InverseError::Invalid(_))));
}
