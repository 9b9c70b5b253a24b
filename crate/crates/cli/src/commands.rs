use std::io::Write;

use serde::Serialize;
use serde_json::{json, Value};
use thermoray_core::flow::{Record, State, Termination, CONVEXITY_TOL};
use thermoray_core::inverse::{
    construct_invariant_function, construct_invariant_oneform, estimate_control_constants, recover_tensor,
    solenoidal_project, solenoidality_residual, write_coefficients_csv, CgOptions, OneForm, SolverReport,
};
use thermoray_core::jacobi::{
    conjugate_scan, riccati_residual, riccati_solutions, terminator_estimate, Nesting, RiccatiOptions, RiccatiSolver,
};
use thermoray_core::phase::{
    mu_plus_covariance_residual, pestov_refinement, run_identity_suite, write_records_csv, PhaseFunction,
    ThermostatFrame, SUITE_SPATIAL_DEGREE,
};
use thermoray_core::random::{random_trig_expr, rng, PhaseSpec};
use thermoray_core::surface::{
    boundary_convexity, conformal_law_residuals, conformal_normalize, ExternalField, IsothermalChart, CONVEXITY_SAMPLES,
};
use thermoray_core::xray::{
    ray_transform_of, sinjectivity_test, transport_solution, Integrand, KernelOptions, PotentialIntegrand,
    SymmetricTensor, TensorBasis, TensorIntegrand, TensorProblem, TransportOptions, TransportSolution,
    DEFAULT_BASIS_DEGREE,
};

use crate::config::{expr, ExperimentConfig};
use crate::error::CliError;
use crate::report::{to_value, Check, Output, Relation};

/// Highest fiber mode produced by the identity suite (test functions up to
/// `|k| = 4`, two frame applications).
const SUITE_FIBER_MODES: usize = 6;

pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub scale: f64,
    pub out: &'a mut Output,
}

impl Context<'_> {
    /// Upper-bound tolerance, after overrides and `--tolerance-scale`.
    fn tol(&self, name: &str, default: f64) -> f64 {
        self.cfg.experiment.tolerances.get(name).copied().unwrap_or(default) * self.scale
    }

    /// Lower-bound threshold, loosened by `--tolerance-scale`.
    fn lower(&self, name: &str, default: f64) -> f64 {
        self.cfg.experiment.tolerances.get(name).copied().unwrap_or(default) / self.scale
    }

    fn at_most(&self, name: &str, value: f64, default: f64) -> Check {
        Check::new(name, value, Relation::AtMost, self.tol(name, default))
    }

    fn csv(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<(), CliError> {
        self.out.write(name, fill).map(|_| ())
    }
}

pub struct CommandOutput {
    pub checks: Vec<Check>,
    pub result: Value,
}

fn require_torus(chart: &IsothermalChart, command: &str) -> Result<(), CliError> {
    if chart.domain.is_closed() {
        Ok(())
    } else {
        Err(CliError::hypothesis(format!("{command} requires a torus chart")))
    }
}

fn require_disk(chart: &IsothermalChart, command: &str) -> Result<(), CliError> {
    if chart.domain.is_closed() {
        Err(CliError::hypothesis(format!("{command} requires a disk chart")))
    } else {
        Ok(())
    }
}

pub fn verify(ctx: &mut Context) -> Result<CommandOutput, CliError> {
    let cfg = ctx.cfg;
    if cfg.fiber_kmax() < SUITE_FIBER_MODES {
        return Err(CliError::config(format!("verify needs Nphi ≥ {}", 2 * SUITE_FIBER_MODES + 1)));
    }
    let mut r = rng(cfg.seed);
    let domain = cfg.domain()?;
    let (chart, field) = match &cfg.experiment.random_fields {
        Some(rf) => {
            let length = match domain {
                thermoray_core::grid::Domain::Torus { length } => length,
                _ => return Err(CliError::config("random_fields is only available on torus charts")),
            };
            let rho = random_trig_expr(&mut r, rf.degree, rf.amplitude, length);
            let e1 = random_trig_expr(&mut r, rf.degree, rf.amplitude, length);
            let e2 = random_trig_expr(&mut r, rf.degree, rf.amplitude, length);
            (cfg.chart_with(rho, cfg.chart.nx, cfg.chart.ny)?, ExternalField::new(e1, e2))
        }
        None => cfg.surface()?,
    };
    let closed = chart.domain.is_closed();
    let frame = ThermostatFrame::new(&chart, &field)?;
    let degree = cfg.experiment.spatial_degree.unwrap_or(if closed { SUITE_SPATIAL_DEGREE } else { 3 });
    let identity_tol = ctx.tol("identity", if closed { 1e-6 } else { 1e-3 });
    let records = run_identity_suite(&frame, &mut r, degree, identity_tol)?;
    let mut checks: Vec<Check> = records
        .iter()
        .map(|rec| Check::new(rec.name.clone(), rec.rel_residual, Relation::AtMost, rec.tolerance))
        .collect();

    let u = PhaseSpec::random(&mut r, chart.domain, &[-3, 0, 4], degree.min(3), 1.0).sample(&frame.grid);
    let nphi = cfg.chart.nphi;
    let a = frame.inner_product(&u, &u)?.re;
    let b = frame.inner_product_sampled(&u, &u, nphi)?.re;
    checks.push(ctx.at_most(&format!("parseval[Nphi={nphi}]"), (a - b).abs() / a.abs().max(f64::MIN_POSITIVE), 1e-10));

    let mut pestov = Value::Null;
    if let Some(p) = &cfg.experiment.pestov_refinement {
        let (coarse, fine) = (p.coarse, p.fine);
        let spec = PhaseSpec::random(&mut r, chart.domain, &[-2, 1, 3], degree, 1.0);
        let ratio = ctx.tol("pestov_ratio", if closed { 0.1 } else { 0.125 });
        let rec = pestov_refinement(&chart, &field, &spec, coarse, fine, ratio)?;
        checks.push(Check::new(rec.name.clone(), rec.rel_residual, Relation::AtMost, ratio));
        pestov = to_value(&rec);
    }

    let samples = cfg.experiment.conformal_samples.unwrap_or(if closed { 20 } else { 0 });
    let mut conformal = Vec::new();
    if samples > 0 {
        let period = match chart.domain {
            thermoray_core::grid::Domain::Torus { length } => length,
            thermoray_core::grid::Domain::Disk { radius } => 4.0 * radius,
        };
        let law_tol = ctx.tol("conformal", 1e-10);
        let mut worst = [0.0f64; 3];
        for _ in 0..samples {
            let sigma = random_trig_expr(&mut r, 2, 0.3, period);
            let res = conformal_law_residuals(&chart, &field, &sigma)?;
            worst[0] = worst[0].max(res.curvature);
            worst[1] = worst[1].max(res.divergence);
            worst[2] = worst[2].max(res.thermostat_curvature);
            conformal.push(res);
        }
        checks.push(Check::new("conformal_curvature", worst[0], Relation::AtMost, law_tol));
        checks.push(Check::new("conformal_divergence", worst[1], Relation::AtMost, law_tol));
        checks.push(Check::new("conformal_thermostat_curvature", worst[2], Relation::AtMost, law_tol));
        let sigma = random_trig_expr(&mut r, 2, 0.3, period);
        for m in 1..=4 {
            let h = PhaseSpec::random(&mut r, chart.domain, &[m], 4, 1.0).sample(&frame.grid);
            let res = mu_plus_covariance_residual(&frame, &sigma, m, h.mode(m).expect("mode m"))?;
            checks.push(ctx.at_most(&format!("mu_plus_covariance[m={m}]"), res, 1e-8));
        }
    }

    ctx.csv("identities.csv", |out| write_records_csv(&records, out))?;
    Ok(CommandOutput {
        checks,
        result: json!({
            "rho": format!("{}", chart.rho.value),
            "E1": format!("{}", field.e1),
            "E2": format!("{}", field.e2),
            "grid": [chart.grid.nx, chart.grid.ny],
            "Nphi": nphi,
            "spatial_degree": degree,
            "identities": records,
            "pestov_refinement": pestov,
            "conformal_laws": conformal,
        }),
    })
}

#[derive(Serialize)]
struct OrbitSummary {
    start: State,
    end: State,
    duration: f64,
    termination: Termination,
    steps: usize,
    reversibility_error: f64,
    doubling_error: f64,
}

pub fn orbit(ctx: &mut Context) -> Result<CommandOutput, CliError> {
    let cfg = ctx.cfg;
    let (chart, field) = cfg.surface()?;
    let flow = cfg.flow(&chart, &field)?;
    let [x, y, phi] = cfg.experiment.start.unwrap_or([0.0, 0.0, 0.0]);
    let start = State::new(x, y, phi);
    let tmax = cfg.experiment.duration.unwrap_or(if chart.domain.is_closed() { 10.0 } else { flow.t_cap });
    if !(tmax > 0.0 && tmax.is_finite()) {
        return Err(CliError::config("experiment.duration must be positive"));
    }
    let orbit = flow.integrate(start, tmax, Record::Full)?;
    if orbit.termination == Termination::StepFailure {
        return Err(CliError::numerical(format!("integration failed at t = {}", orbit.duration())));
    }
    let duration = orbit.duration();
    let back = flow.integrate(orbit.end().flipped(), duration, Record::Endpoints)?;
    let e = back.end();
    let dphi = (e.phi - std::f64::consts::PI - start.phi + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
        - std::f64::consts::PI;
    let reversibility_error = (e.x - start.x).hypot(e.y - start.y).max(dphi.abs());
    let doubling_error = if duration > 0.0 { flow.doubling_error(start, duration)? } else { 0.0 };
    let summary = OrbitSummary {
        start,
        end: orbit.end(),
        duration,
        termination: orbit.termination,
        steps: orbit.samples.len() - 1,
        reversibility_error,
        doubling_error,
    };
    ctx.csv("orbit.csv", |out| orbit.write_csv(out))?;
    let checks = vec![
        ctx.at_most("reversibility", reversibility_error, 1e-8),
        ctx.at_most("step_doubling", doubling_error, 1e-6),
    ];
    Ok(CommandOutput { checks, result: to_value(&summary) })
}

pub fn convexity(ctx: &mut Context) -> Result<CommandOutput, CliError> {
    let (chart, field) = ctx.cfg.surface()?;
    require_disk(&chart, "convexity")?;
    let report = boundary_convexity(&chart, &field, CONVEXITY_SAMPLES)?;
    let checks = vec![Check::new("convexity_margin", report.margin, Relation::Above, CONVEXITY_TOL)];
    Ok(CommandOutput { checks, result: to_value(&report) })
}

pub fn simplicity(ctx: &mut Context) -> Result<CommandOutput, CliError> {
    let (chart, field) = ctx.cfg.surface()?;
    require_disk(&chart, "simplicity")?;
    let report = thermoray_core::flow::simplicity_check(&chart, &field, &ctx.cfg.fan())?;
    let checks = vec![
        Check::new("convexity_margin", report.convexity.margin, Relation::Above, CONVEXITY_TOL),
        Check::new("not_exited", report.not_exited as f64, Relation::Equal, 0.0),
        Check::new("conjugate_orbits", report.conjugate_orbits as f64, Relation::Equal, 0.0),
        Check::flag("exit_monotone", report.injectivity.monotone),
    ];
    Ok(CommandOutput { checks, result: to_value(&report) })
}

pub fn conjugates(ctx: &mut Context) -> Result<CommandOutput, CliError> {
    let cfg = ctx.cfg;
    let (chart, field) = cfg.surface()?;
    require_disk(&chart, "conjugates")?;
    let flow = cfg.flow(&chart, &field)?;
    let beta = cfg.experiment.beta.unwrap_or(1.0);
    let scan = conjugate_scan(&flow, beta, &cfg.fan())?;
    let times = scan.first_conjugate_times();
    let min = times.iter().copied().fold(f64::INFINITY, f64::min);
    let max = times.iter().copied().fold(0.0, f64::max);
    ctx.csv("conjugates.csv", |out| scan.write_csv(out))?;
    Ok(CommandOutput {
        checks: Vec::new(),
        result: json!({
            "beta": beta,
            "fan": scan.fan,
            "orbits": scan.records.len(),
            "not_exited": scan.records.iter().filter(|r| r.exit.exit_time.is_none()).count(),
            "conjugate_orbits": scan.conjugate_count(),
            "first_conjugate_min": if times.is_empty() { Value::Null } else { json!(min) },
            "first_conjugate_max": if times.is_empty() { Value::Null } else { json!(max) },
        }),
    })
}

pub fn terminator(ctx: &mut Context) -> Result<CommandOutput, CliError> {
    let cfg = ctx.cfg;
    let (chart, field) = cfg.surface()?;
    require_disk(&chart, "terminator")?;
    let flow = cfg.flow(&chart, &field)?;
    let beta_max = cfg.experiment.beta_max.unwrap_or(10.0);
    let tol = cfg.experiment.beta_tol.unwrap_or(1e-3);
    let est = terminator_estimate(&flow, &cfg.fan(), beta_max, tol)?;
    let summary = json!({
        "beta_hat": est.beta_hat,
        "capped": est.capped,
        "tol": est.tol,
        "fan_size": est.fan.len(),
    });
    ctx.out.write_json("terminator_estimate.json", &summary)?;
    let mut result = to_value(&est);
    result["fan_size"] = json!(est.fan.len());
    Ok(CommandOutput { checks: Vec::new(), result })
}

pub fn riccati(ctx: &mut Context) -> Result<CommandOutput, CliError> {
    let cfg = ctx.cfg;
    let (chart, field) = cfg.surface()?;
    require_disk(&chart, "riccati")?;
    let beta = cfg.experiment.beta.unwrap_or(1.0);
    let opts = RiccatiOptions {
        beta,
        n: cfg.experiment.grid_n.unwrap_or(17),
        nphi: cfg.experiment.grid_nphi.unwrap_or(16),
        step: cfg.integrator.h,
        simplicity_fan: Some(cfg.fan()),
        ..RiccatiOptions::default()
    };
    let sols = riccati_solutions(&chart, &field, &opts)?;
    let solver = RiccatiSolver::new(&chart, &field, Nesting::default(), beta, cfg.integrator.h)?;
    let probes = cfg.experiment.probes.unwrap_or(100);
    let residual = riccati_residual(&solver, probes, 2, 1e-3, &mut rng(cfg.seed))?;
    ctx.csv("riccati.csv", |out| {
        writeln!(out, "x,y,phi,r_plus,r_minus")?;
        let grid = &sols.plus.grid;
        for (idx, x, y) in grid.points() {
            if !grid.mask[idx] {
                continue;
            }
            for j in 0..opts.nphi {
                let phi = 2.0 * std::f64::consts::PI * j as f64 / opts.nphi as f64;
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    x + 0.0,
                    y + 0.0,
                    phi,
                    sols.plus.at_node(idx, j),
                    sols.minus.at_node(idx, j)
                )?;
            }
        }
        Ok(())
    })?;
    let tol = 5e-3;
    let checks = vec![
        ctx.at_most("riccati_residual_plus", residual.plus_sup, tol),
        ctx.at_most("riccati_residual_minus", residual.minus_sup, tol),
        Check::new("min_separation", sols.min_separation, Relation::Above, 0.0),
    ];
    Ok(CommandOutput {
        checks,
        result: json!({
            "beta": beta,
            "grid": [opts.n, opts.n],
            "nphi": opts.nphi,
            "nesting": opts.nesting,
            "min_separation": sols.min_separation,
            "argmin": sols.argmin,
            "residual": residual,
        }),
    })
}

fn tensor_from(what: &str, components: &[String]) -> Result<SymmetricTensor, CliError> {
    let exprs =
        components.iter().enumerate().map(|(j, s)| expr(&format!("{what}[{j}]"), s)).collect::<Result<Vec<_>, _>>()?;
    SymmetricTensor::new(exprs).map_err(|e| CliError::config(format!("{what}: {e}")))
}

/// The integrand selected by `experiment.tensor` or `experiment.potential`.
enum Source {
    Tensor(SymmetricTensor),
    Potential(SymmetricTensor),
}

impl Source {
    fn from_config(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        match (&cfg.experiment.tensor, &cfg.experiment.potential) {
            (Some(t), None) => Ok(Source::Tensor(tensor_from("tensor", t)?)),
            (None, Some(h)) => Ok(Source::Potential(tensor_from("potential", h)?)),
            (None, None) => Err(CliError::config("set experiment.tensor or experiment.potential")),
            (Some(_), Some(_)) => Err(CliError::config("experiment.tensor and experiment.potential are exclusive")),
        }
    }

    fn order(&self) -> usize {
        match self {
            Source::Tensor(t) => t.order(),
            Source::Potential(h) => h.order() + 1,
        }
    }

    fn integrand<'a>(&'a self, chart: &IsothermalChart, field: &ExternalField) -> Box<dyn Integrand + 'a> {
        match self {
            Source::Tensor(t) => Box::new(TensorIntegrand::new(chart, &[t])),
            Source::Potential(h) => Box::new(PotentialIntegrand::new(chart, field, &[h])),
        }
    }

    fn is_potential(&self) -> bool {
        matches!(self, Source::Potential(_))
    }
}

fn write_transport(sol: &TransportSolution, out: &mut Vec<u8>) -> std::io::Result<()> {
    writeln!(out, "x,y,phi,u")?;
    for (idx, x, y) in sol.grid.points() {
        for j in 0..sol.nphi {
            let v = sol.values[idx * sol.nphi + j];
            if v.is_finite() {
                let phi = 2.0 * std::f64::consts::PI * j as f64 / sol.nphi as f64;
                writeln!(out, "{},{},{},{}", x + 0.0, y + 0.0, phi, v + 0.0)?;
            }
        }
    }
    Ok(())
}

pub fn xray(ctx: &mut Context) -> Result<CommandOutput, CliError> {
    let cfg = ctx.cfg;
    let (chart, field) = cfg.surface()?;
    require_disk(&chart, "xray")?;
    let flow = cfg.flow(&chart, &field)?;
    let source = Source::from_config(cfg)?;
    let integrand = source.integrand(&chart, &field);
    let data = ray_transform_of(&flow, integrand.as_ref(), &cfg.fan())?;
    ctx.csv("raydata.csv", |out| data.write_csv(out))?;
    let max_abs = data.values.iter().map(|v| v.value.abs()).fold(0.0, f64::max);
    let mut checks = Vec::new();
    if source.is_potential() {
        checks.push(ctx.at_most("potential_over_length", data.max_relative_to_length(), 1e-6));
    }
    let mut transport = Value::Null;
    if cfg.experiment.transport.unwrap_or(false) {
        let opts = TransportOptions {
            n: cfg.experiment.grid_n.unwrap_or(TransportOptions::default().n),
            nphi: cfg.experiment.grid_nphi.unwrap_or(TransportOptions::default().nphi),
            ..TransportOptions::default()
        };
        if source.order() > 0 && !source.is_potential() {
            return Err(CliError::config("transport needs a function (order-0 tensor) or a potential"));
        }
        let sol = transport_solution(&flow, integrand.as_ref(), &opts)?;
        checks.push(ctx.at_most("transport_residual", sol.residual_sup, 1e-3));
        if source.is_potential() {
            checks.push(ctx.at_most("transport_boundary", sol.boundary_sup, 1e-6));
        }
        ctx.csv("transport.csv", |out| write_transport(&sol, out))?;
        transport = to_value(&sol);
    }
    Ok(CommandOutput {
        checks,
        result: json!({
            "m": source.order(),
            "potential": source.is_potential(),
            "orbits": data.len(),
            "quadrature": data.quadrature,
            "max_abs": max_abs,
            "max_relative_to_length": data.max_relative_to_length(),
            "transport": transport,
        }),
    })
}

fn kernel_options(cfg: &ExperimentConfig, m: usize) -> KernelOptions {
    let mut o = KernelOptions::new(m);
    let degree = cfg.experiment.basis_degree.unwrap_or(DEFAULT_BASIS_DEGREE);
    o.basis = TensorBasis::new(m, degree);
    o.potential_degree = degree + 4;
    o.fan = cfg.fan();
    if let Some(t) = cfg.experiment.threshold {
        o.threshold = t;
    }
    o
}

pub fn kernel(ctx: &mut Context) -> Result<CommandOutput, CliError> {
    let cfg = ctx.cfg;
    let (chart, field) = cfg.surface()?;
    require_disk(&chart, "kernel")?;
    let flow = cfg.flow(&chart, &field)?;
    let m = cfg.experiment.m.unwrap_or(2);
    let report = sinjectivity_test(&flow, &kernel_options(cfg, m))?;
    ctx.out.write_json("kernel_test.json", &report)?;
    ctx.csv("singular_values.csv", |out| {
        writeln!(out, "index,sigma")?;
        for (i, s) in report.singular_values.iter().enumerate() {
            writeln!(out, "{i},{s}")?;
        }
        Ok(())
    })?;
    let checks = vec![
        Check::new(
            "kernel_dim_minus_potential_dim",
            report.kernel_dim as f64 - report.potential_dim as f64,
            Relation::Equal,
            0.0,
        ),
        ctx.at_most("principal_angle", report.principal_angle, 1e-3),
        Check::new("gap_ratio", report.gap_ratio, Relation::AtLeast, ctx.lower("gap_ratio", 1e3)),
    ];
    Ok(CommandOutput { checks, result: to_value(&report) })
}

pub fn invert(ctx: &mut Context) -> Result<CommandOutput, CliError> {
    let cfg = ctx.cfg;
    let (chart, field) = cfg.surface()?;
    require_disk(&chart, "invert")?;
    let flow = cfg.flow(&chart, &field)?;
    let source = Source::from_config(cfg)?;
    let m = source.order();
    let problem = TensorProblem::assemble(&flow, &kernel_options(cfg, m))?;
    let integrand = source.integrand(&chart, &field);
    let data = ray_transform_of(&flow, integrand.as_ref(), &cfg.fan())?;
    let truth = match &source {
        Source::Tensor(t) => Some(t),
        Source::Potential(_) => None,
    };
    let (rec, _) = recover_tensor(&problem, &data, cfg.experiment.reg, truth)?;
    let basis = &problem.options.basis;
    ctx.csv("recovery.csv", |out| write_coefficients_csv(basis, &rec.coefficients, out))?;
    let mut checks = Vec::new();
    let mut phantom_scale = Value::Null;
    match &source {
        Source::Tensor(_) => {
            checks.push(ctx.at_most("relative_error", rec.relative_error.unwrap_or(f64::NAN), 0.05));
        }
        Source::Potential(_) => {
            let scale = problem.samples.matrix(integrand.as_ref())?.norm();
            phantom_scale = json!(scale);
            checks.push(ctx.at_most("solenoidal_over_scale", rec.solenoidal_norm / scale.max(f64::MIN_POSITIVE), 1e-3));
        }
    }
    let mut result = to_value(&rec);
    result["potential"] = json!(source.is_potential());
    result["phantom_scale"] = phantom_scale;
    result["gram_condition"] = json!(problem.gram_condition);
    Ok(CommandOutput { checks, result })
}

pub fn normalize_curvature(ctx: &mut Context) -> Result<CommandOutput, CliError> {
    let (chart, field) = ctx.cfg.surface()?;
    require_torus(&chart, "normalize-curvature")?;
    let n = conformal_normalize(&chart, &field)?;
    ctx.csv("sigma.csv", |out| n.sigma.write_csv(out))?;
    let new_sup = n.new_curvature.sup_norm();
    let checks = vec![
        ctx.at_most("poisson_residual", n.poisson_residual, 1e-10),
        ctx.at_most("new_thermostat_curvature_sup", new_sup, 1e-8),
    ];
    Ok(CommandOutput {
        checks,
        result: json!({
            "c": n.c,
            "poisson_residual": n.poisson_residual,
            "curvature_residual": n.curvature_residual,
            "new_thermostat_curvature_sup": new_sup,
            "sigma_sup": n.sigma.sup_norm(),
        }),
    })
}

#[derive(Serialize)]
struct DemoLevel {
    n: usize,
    kmax: usize,
    function: SolverReport,
    function_invariance_residual: f64,
    w0_exact: bool,
    oneform: SolverReport,
    oneform_invariance_residual: f64,
    solenoidal_residual: f64,
    a0: f64,
    modes_exact: bool,
}

pub fn surjectivity_demo(ctx: &mut Context) -> Result<CommandOutput, CliError> {
    let cfg = ctx.cfg;
    let (chart, field) = cfg.surface()?;
    require_torus(&chart, "surjectivity-demo")?;
    let e = &cfg.experiment;
    let f_expr = expr("f", e.f.as_deref().unwrap_or("cos(x)"))?;
    let (a1, a2) = match &e.alpha {
        Some([a1, a2]) => (expr("alpha[0]", a1)?, expr("alpha[1]", a2)?),
        None => (expr("alpha[0]", "cos(y) + 0.3*sin(x+y)")?, expr("alpha[1]", "sin(x) - 0.3*sin(x+y)")?),
    };
    let kmax = e.kmax.unwrap_or(4);
    let base_n = cfg.chart.nx;
    let mut levels = Vec::new();
    for (n, k) in [(base_n, kmax), (2 * base_n, 2 * kmax)] {
        let c = chart.with_resolution(n, n)?;
        let frame = ThermostatFrame::new(&c, &field)?;
        let opts = CgOptions { kmax: k, tol: e.cg_tol.unwrap_or(1e-8), max_iter: e.max_iter };
        let f: Vec<f64> = frame.grid.points().map(|(_, x, y)| f_expr.eval(x, y)).collect::<Result<_, _>>()?;
        let a = PhaseFunction::zero(frame.grid.clone(), 0);
        let fun = construct_invariant_function(&frame, &f, &a, &opts)?;
        let alpha = solenoidal_project(&frame, &OneForm::from_exprs(&frame.grid, &a1, &a2)?)?;
        let one = construct_invariant_oneform(&frame, &alpha, &opts)?;
        levels.push(DemoLevel {
            n,
            kmax: k,
            function_invariance_residual: fun.invariance_residual,
            function: fun.solver,
            w0_exact: fun.w0_exact,
            oneform_invariance_residual: one.invariance_residual,
            oneform: one.solver,
            solenoidal_residual: solenoidality_residual(&frame, &alpha)?,
            a0: one.a0,
            modes_exact: one.modes_exact,
        });
    }
    let m = e.m.unwrap_or(2);
    let samples = e.control_samples.unwrap_or(20);
    let control = if samples > 0 {
        let frame = ThermostatFrame::new(&chart, &field)?;
        to_value(&estimate_control_constants(&frame, m, samples, 2, &mut rng(cfg.seed))?)
    } else {
        Value::Null
    };
    let (coarse, fine) = (&levels[0], &levels[1]);
    let mut checks = Vec::new();
    for l in &levels {
        let tag = format!("n={},kmax={}", l.n, l.kmax);
        checks.push(Check::flag(format!("w0_exact[{tag}]"), l.w0_exact));
        checks.push(ctx.at_most(&format!("a0[{tag}]"), l.a0, 1e-10));
        checks.push(Check::flag(format!("oneform_modes_exact[{tag}]"), l.modes_exact));
        checks.push(ctx.at_most(&format!("solenoidal_residual[{tag}]"), l.solenoidal_residual, 1e-8));
    }
    checks.push(Check::new(
        "function_residual_ratio",
        fine.function.residual / coarse.function.residual,
        Relation::AtMost,
        1.0,
    ));
    checks.push(Check::new(
        "oneform_residual_ratio",
        fine.oneform.residual / coarse.oneform.residual,
        Relation::AtMost,
        1.0,
    ));
    let solver_reports: Vec<&SolverReport> = levels.iter().flat_map(|l| [&l.function, &l.oneform]).collect();
    ctx.out.write_json("solver_reports.json", &solver_reports)?;
    Ok(CommandOutput {
        checks,
        result: json!({
            "levels": levels,
            "control_constants": control,
        }),
    })
}
