//! Acceptance suite: one line per criterion, then a single assertion.
//!
//! Run with `cargo test -p thermoray --test acceptance -- --nocapture`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use thermoray_cli::config::ExperimentConfig;
use thermoray_cli::report::Report;
use thermoray_cli::{execute, Command};
use thermoray_core::exprfield::parse;
use thermoray_core::flow::{Fan, Record, State, Termination, ThermostatFlow};
use thermoray_core::grid::Domain;
use thermoray_core::jacobi::{conjugate_scan, riccati_solutions, RiccatiOptions};
use thermoray_core::surface::{ExternalField, IsothermalChart};
use thermoray_core::xray::{
    boundary_vanishing_tensor, ray_transform, ray_transform_of, PotentialIntegrand, SymmetricTensor,
};

const SPHERE: &str = "log(2/(1+x^2+y^2))";
const HYPERBOLIC: &str = "log(2/(1-x^2-y^2))";

type Outcome<T> = Result<T, String>;

/// Measurements for one criterion.
#[derive(Default)]
struct Tally {
    items: Vec<(String, bool)>,
}

impl Tally {
    fn at_most(&mut self, name: &str, value: f64, tol: f64) {
        self.items.push((format!("{name} {value:.2e}<={tol:.0e}"), value <= tol));
    }

    fn at_least(&mut self, name: &str, value: f64, bound: f64) {
        self.items.push((format!("{name} {value:.3e}>={bound:.0e}"), value >= bound));
    }

    fn holds(&mut self, name: &str, ok: bool) {
        self.items.push((name.to_string(), ok));
    }

    fn pass(&self) -> bool {
        !self.items.is_empty() && self.items.iter().all(|(_, ok)| *ok)
    }

    fn summary(&self) -> String {
        let failed: Vec<&str> = self.items.iter().filter(|(_, ok)| !ok).map(|(s, _)| s.as_str()).collect();
        if failed.is_empty() {
            self.items.iter().map(|(s, _)| s.as_str()).collect::<Vec<_>>().join("; ")
        } else {
            format!("failed: {}", failed.join("; "))
        }
    }
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(command: Command, config: &str, dir: &Path) -> Outcome<Report> {
    let cfg = ExperimentConfig::load(&config_path(config)).map_err(|e| e.to_string())?;
    execute(command, &cfg, 1.0, dir).map(|o| o.report).map_err(|e| format!("{config}: {e}"))
}

fn run_temp(command: Command, config: &str) -> Outcome<Report> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    run(command, config, dir.path())
}

fn check(report: &Report, name: &str) -> Outcome<f64> {
    report
        .checks
        .iter()
        .find(|c| c.name == name)
        .map(|c| c.value)
        .ok_or_else(|| format!("{} report has no check `{name}`", report.command))
}

fn result_f64(report: &Report, key: &str) -> Outcome<f64> {
    report.result[key].as_f64().ok_or_else(|| format!("{} result has no `{key}`", report.command))
}

fn worst(report: &Report, pred: impl Fn(&str) -> bool) -> (f64, usize) {
    report.checks.iter().filter(|c| pred(&c.name)).fold((0.0, 0), |(w, n), c| (f64::max(w, c.value), n + 1))
}

fn disk(rho: &str, radius: f64) -> Outcome<IsothermalChart> {
    IsothermalChart::new(Domain::Disk { radius }, parse(rho).map_err(|e| e.to_string())?, 17, 17)
        .map_err(|e| e.to_string())
}

fn field(e1: &str, e2: &str) -> Outcome<ExternalField> {
    Ok(ExternalField::new(parse(e1).map_err(|e| e.to_string())?, parse(e2).map_err(|e| e.to_string())?))
}

fn flow(rho: &str, radius: f64, e: &ExternalField) -> Outcome<ThermostatFlow> {
    ThermostatFlow::new(&disk(rho, radius)?, e).map_err(|e| e.to_string())
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn torus_identities(t: &mut Tally) -> Outcome<()> {
    let report = run_temp(Command::Verify, "identity_suite_torus.json")?;
    let identity = |n: &str| {
        !(n.starts_with("conformal")
            || n.starts_with("mu_plus")
            || n.starts_with("parseval")
            || n.starts_with("pestov_refinement"))
    };
    let (w, n) = worst(&report, identity);
    t.holds("twelve identities", n == 12);
    t.at_most("worst identity residual", w, 1e-6);
    t.at_most("pestov 64/32 ratio", check(&report, "pestov_refinement[32->64]")?, 0.1);
    Ok(())
}

fn conformal_laws(t: &mut Tally) -> Outcome<()> {
    let report = run_temp(Command::Verify, "identity_suite_torus.json")?;
    let samples = report.result["conformal_laws"].as_array().map_or(0, Vec::len);
    t.holds("20 random conformal factors", samples == 20);
    let (w, n) = worst(&report, |n| n.starts_with("conformal"));
    t.holds("three conformal laws", n == 3);
    t.at_most("conformal laws", w, 1e-10);
    let (w, n) = worst(&report, |n| n.starts_with("mu_plus_covariance"));
    t.holds("m = 1..4", n == 4);
    t.at_most("mu+ covariance", w, 1e-8);
    Ok(())
}

fn normalization(t: &mut Tally) -> Outcome<()> {
    let report = run_temp(Command::NormalizeCurvature, "normalize_torus.json")?;
    t.at_most("poisson residual", check(&report, "poisson_residual")?, 1e-10);
    t.at_most("new K sup", check(&report, "new_thermostat_curvature_sup")?, 1e-8);
    Ok(())
}

/// Time at which the geodesic from (0.3, 0) heading north on the round
/// sphere next crosses `y = 0` upwards.
fn sphere_period() -> Outcome<f64> {
    let f = flow(SPHERE, 5.0, &ExternalField::zero())?;
    let orbit = f.integrate(State::new(0.3, 0.0, 0.5 * PI), 2.0 * PI - 0.05, Record::States).map_err(err)?;
    let s0 = orbit.end();
    let (mut lo, mut hi) = (0.0, 0.1);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f.rk4_step(s0, mid).map_err(err)?.y < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(orbit.duration() + 0.5 * (lo + hi))
}

fn flow_checks(t: &mut Tally) -> Outcome<()> {
    let flat = flow("0", 20.0, &ExternalField::zero())?;
    let mut line = 0.0f64;
    for (x, y, phi) in [(0.0, 0.0, 0.3), (1.0, -2.0, 2.0), (-3.0, 1.5, 4.4)] {
        let orbit = flat.integrate_orbit(x, y, phi, 5.0).map_err(err)?;
        for s in &orbit.samples {
            let dx = s.state.x - (x + s.t * phi.cos());
            let dy = s.state.y - (y + s.t * phi.sin());
            line = line.max(dx.hypot(dy)).max((s.state.phi - phi).abs());
        }
    }
    t.at_most("flat lines", line, 1e-10);

    let pushed = flow("0", 20.0, &field("1", "0")?)?;
    let orbit = pushed.integrate_orbit(0.0, 0.0, 2.0, 5.0).map_err(err)?;
    let c0 = orbit.start().y + orbit.start().phi;
    let drift = orbit.samples.iter().map(|s| (s.state.y + s.state.phi - c0).abs()).fold(0.0, f64::max);
    t.holds("t in [0,5]", orbit.termination == Termination::Tmax);
    t.at_most("y+phi drift", drift, 1e-8);

    t.at_most("sphere period error", (sphere_period()? - 2.0 * PI).abs(), 1e-6);

    let report = run_temp(Command::Orbit, "thermostat_disk.json")?;
    t.at_most("reversibility", check(&report, "reversibility")?, 1e-8);
    Ok(())
}

fn conjugate_points(t: &mut Tally) -> Outcome<()> {
    let report = run_temp(Command::Conjugates, "sphere_cap.json")?;
    let lo = result_f64(&report, "first_conjugate_min")?;
    let hi = result_f64(&report, "first_conjugate_max")?;
    t.holds("sphere has conjugate orbits", result_f64(&report, "conjugate_orbits")? > 0.0);
    t.at_most("sphere first conjugate - pi", f64::max((lo - PI).abs(), (hi - PI).abs()), 1e-4);

    let mut empty = true;
    let scans = [
        flow("0", 1.0, &ExternalField::zero())?,
        flow(HYPERBOLIC, 0.6, &ExternalField::zero())?,
        flow("0", 1.0, &field("0.2*x", "0.1*y")?)?,
    ];
    for f in &scans {
        for beta in [0.5, 1.0, 4.0, 50.0] {
            empty &= conjugate_scan(f, beta, &Fan::new(8, 7)).map_err(err)?.is_conjugate_free();
        }
    }
    t.holds("flat and K<=0 scans empty", empty);

    let cap = run_temp(Command::Terminator, "small_sphere_cap.json")?;
    let oracle = (PI / (4.0 * 0.5f64.atan())).powi(2);
    let beta = result_f64(&cap, "beta_hat")?;
    t.holds("cap terminator found", cap.result["capped"] == false);
    t.at_most("terminator vs (pi/L)^2", (beta - oracle).abs() / oracle, 0.02);
    let hyp = run_temp(Command::Terminator, "neg_curv_disk.json")?;
    t.holds("K<0 terminator capped", hyp.result["capped"] == true);
    Ok(())
}

/// Time back to the circle of radius `r` along a straight line.
fn back_time(s: State, r: f64) -> f64 {
    let pv = s.x * s.phi.cos() + s.y * s.phi.sin();
    pv + (pv * pv - s.x * s.x - s.y * s.y + r * r).sqrt()
}

fn riccati(t: &mut Tally) -> Outcome<()> {
    let opts = RiccatiOptions { n: 9, nphi: 8, ..Default::default() };
    let sols = riccati_solutions(&disk("0", 1.0)?, &ExternalField::zero(), &opts).map_err(err)?;
    let mut gap = 0.0f64;
    let mut points = 0;
    for (idx, x, y) in sols.plus.grid.points() {
        for j in 0..opts.nphi {
            let s = State::new(x, y, 2.0 * PI * j as f64 / opts.nphi as f64);
            let plus = sols.plus.at_node(idx, j);
            if plus.is_nan() {
                continue;
            }
            gap = gap.max((plus - 1.0 / back_time(s, 1.2)).abs());
            gap = gap.max((sols.minus.at_node(idx, j) + 1.0 / back_time(s.flipped(), 1.1)).abs());
            points += 1;
        }
    }
    t.holds("oracle points", points > 300);
    t.at_most("flat 1/t_entry", gap, 1e-4);

    let report = run_temp(Command::Riccati, "thermostat_disk.json")?;
    let res = check(&report, "riccati_residual_plus")?.max(check(&report, "riccati_residual_minus")?);
    t.at_most("residual", res, 5e-3);
    let sep = check(&report, "min_separation")?;
    t.holds(&format!("min(r+ - r-) {sep:.3e} > 0"), sep > 0.0);
    Ok(())
}

fn ray_transform_checks(t: &mut Tally) -> Outcome<()> {
    let e = field("0.1*x", "0.1*y")?;
    let c = disk("0", 1.0)?;
    let f = ThermostatFlow::new(&c, &e).map_err(err)?;
    let mut worst_potential = 0.0f64;
    for m in 1..=3 {
        let h = boundary_vanishing_tensor(m - 1, 0, 1, 0, 1.0)
            .combine(1.0, &boundary_vanishing_tensor(m - 1, m - 1, 0, 2, 1.0), 0.7)
            .map_err(err)?;
        let data = ray_transform_of(&f, &PotentialIntegrand::new(&c, &e, &[&h]), &Fan::new(10, 6)).map_err(err)?;
        worst_potential = worst_potential.max(data.max_relative_to_length());
    }
    t.at_most("potentials m=1..3 / length", worst_potential, 1e-6);

    let flat = flow("0", 1.0, &ExternalField::zero())?;
    let one = SymmetricTensor::new(vec![parse("1").map_err(err)?]).map_err(err)?;
    let data = ray_transform(&flat, &one, &Fan::new(12, 7)).map_err(err)?;
    let chord = data.values.iter().map(|v| (v.value - 2.0 * v.theta.cos()).abs()).fold(0.0, f64::max);
    t.at_most("chords 2cos(theta)", chord, 1e-8);

    let report = run_temp(Command::Xray, "potential_xray.json")?;
    t.at_most("potential data", check(&report, "potential_over_length")?, 1e-6);
    t.at_most("u^f transport", check(&report, "transport_residual")?, 1e-3);
    t.at_most("u^f on boundary", check(&report, "transport_boundary")?, 1e-6);
    Ok(())
}

fn kernel(t: &mut Tally) -> Outcome<()> {
    let report = run_temp(Command::Kernel, "kernel_disk.json")?;
    t.holds("m = 2", result_f64(&report, "m")? == 2.0);
    t.holds("kernel dim = potential dim", check(&report, "kernel_dim_minus_potential_dim")? == 0.0);
    t.at_most("principal angle", check(&report, "principal_angle")?, 1e-3);
    t.at_least("gap ratio", check(&report, "gap_ratio")?, 1e3);
    Ok(())
}

fn recipes(t: &mut Tally) -> Outcome<()> {
    let report = run_temp(Command::SurjectivityDemo, "surjectivity_demo.json")?;
    let flags = |prefix: &str| report.checks.iter().filter(|c| c.name.starts_with(prefix)).collect::<Vec<_>>();
    let w0 = flags("w0_exact[");
    t.holds("w0 = f", !w0.is_empty() && w0.iter().all(|c| c.pass));
    let modes = flags("oneform_modes_exact[");
    t.holds("w-1 + w1 = alpha", !modes.is_empty() && modes.iter().all(|c| c.pass));
    t.at_most("a0", worst(&report, |n| n.starts_with("a0[")).0, 1e-10);
    t.at_most("solenoidal projection", worst(&report, |n| n.starts_with("solenoidal_residual[")).0, 1e-8);
    let ratio = check(&report, "function_residual_ratio")?.max(check(&report, "oneform_residual_ratio")?);
    t.holds(&format!("residuals decrease under refinement ({ratio:.3})"), ratio < 1.0);
    Ok(())
}

fn recovery(t: &mut Tally) -> Outcome<()> {
    let phantom = run_temp(Command::Invert, "invert_phantom.json")?;
    t.holds("m = 0 phantom", result_f64(&phantom, "m")? == 0.0);
    t.at_most("phantom relative error", check(&phantom, "relative_error")?, 0.05);
    let potential = run_temp(Command::Invert, "invert_potential.json")?;
    t.at_most("potential-only solenoidal / scale", check(&potential, "solenoidal_over_scale")?, 1e-3);
    Ok(())
}

fn files(dir: &Path) -> Outcome<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(err)? {
        let path = entry.map_err(err)?.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        out.push((name, fs::read(&path).map_err(err)?));
    }
    out.sort();
    Ok(out)
}

fn determinism(t: &mut Tally) -> Outcome<()> {
    let cases = [
        (Command::Verify, "flat_torus.json"),
        (Command::Riccati, "thermostat_disk.json"),
        (Command::Terminator, "small_sphere_cap.json"),
        (Command::Xray, "potential_xray.json"),
        (Command::Kernel, "kernel_disk.json"),
        (Command::Invert, "invert_phantom.json"),
    ];
    for (command, config) in cases {
        let a = tempfile::tempdir().map_err(err)?;
        let b = tempfile::tempdir().map_err(err)?;
        run(command, config, a.path())?;
        run(command, config, b.path())?;
        let (fa, fb) = (files(a.path())?, files(b.path())?);
        t.holds(&format!("{} identical", command.name()), fa.len() > 1 && fa == fb);
    }
    Ok(())
}

#[test]
fn primary_criteria() {
    let criteria: [(&str, fn(&mut Tally) -> Outcome<()>); 11] = [
        ("torus identity suite", torus_identities),
        ("conformal laws", conformal_laws),
        ("conformal normalization", normalization),
        ("thermostat flow", flow_checks),
        ("conjugate points and terminator", conjugate_points),
        ("Riccati solutions", riccati),
        ("ray transform", ray_transform_checks),
        ("kernel of the ray transform", kernel),
        ("surjectivity recipes", recipes),
        ("recovery", recovery),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (title, criterion)) in criteria.iter().enumerate() {
        let mut tally = Tally::default();
        let outcome = criterion(&mut tally);
        let pass = outcome.is_ok() && tally.pass();
        let detail = match outcome {
            Ok(()) => tally.summary(),
            Err(e) => format!("error: {e}"),
        };
        println!("criterion {:>2} {}  {title}: {detail}", i + 1, if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
