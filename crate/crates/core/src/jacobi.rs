//! The β-Jacobi equation `ÿ - Vλ ẏ + (β𝕂 - G_E Vλ) y = 0` along thermostat
//! orbits, conjugate points, terminator values, Riccati solutions and
//! α-control certificates.
//!
//! Coefficients are sampled along an orbit at the integrator's step times.
//! The solver takes one RK4 step per sample interval and reads the
//! midpoint coefficients off a cubic Lagrange interpolant through the four
//! nearest samples.

use std::f64::consts::PI;
use std::io::{self, Write};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::exprfield::EvalError;
use crate::flow::{Fan, FanEntry, FanExit, FlowError, Record, State, Termination, ThermostatFlow, ThermostatOrbit};
use crate::grid::{Domain, Grid2};
use crate::phase::{PhaseError, ThermostatFrame};
use crate::random::PhaseSpec;
use crate::surface::{ExternalField, IsothermalChart, SurfaceError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JacobiError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("expression evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error(transparent)]
    Phase(#[from] PhaseError),
    #[error("coefficient requested at t = {t} outside the sampled orbit [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("conjugate point along the orbit through ({x}, {y}, {phi})")]
    ConjugatePoint { x: f64, y: f64, phi: f64 },
    #[error("hypothesis not met: {0}")]
    Hypothesis(String),
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

/// Along-orbit coefficients `Vλ`, `𝕂` and `G_E Vλ`.
#[derive(Debug, Clone)]
pub struct JacobiCoefficients {
    pub t: Vec<f64>,
    pub v_lambda: Vec<f64>,
    pub kthermo: Vec<f64>,
    pub ge_v_lambda: Vec<f64>,
    mid: Vec<[f64; 3]>,
}

impl JacobiCoefficients {
    /// Reads the scalars of an orbit recorded with [`Record::Full`].
    pub fn from_orbit(orbit: &ThermostatOrbit) -> Self {
        let n = orbit.samples.len();
        let mut c = JacobiCoefficients {
            t: Vec::with_capacity(n),
            v_lambda: Vec::with_capacity(n),
            kthermo: Vec::with_capacity(n),
            ge_v_lambda: Vec::with_capacity(n),
            mid: Vec::new(),
        };
        for s in &orbit.samples {
            c.t.push(s.t);
            c.v_lambda.push(s.scalars.v_lambda);
            c.kthermo.push(s.scalars.kthermo);
            c.ge_v_lambda.push(s.scalars.ge_v_lambda);
        }
        c.mid = (0..n.saturating_sub(1)).map(|i| c.interpolate_in(i, 0.5 * (c.t[i] + c.t[i + 1]))).collect();
        c
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.t.last().copied().unwrap_or(0.0) - self.t.first().copied().unwrap_or(0.0)
    }

    fn sample(&self, i: usize) -> [f64; 3] {
        [self.v_lambda[i], self.kthermo[i], self.ge_v_lambda[i]]
    }

    /// Lagrange interpolation through (up to) four samples around interval `i`.
    fn interpolate_in(&self, i: usize, t: f64) -> [f64; 3] {
        let n = self.t.len();
        let w = n.min(4);
        let start = i.saturating_sub(1).min(n - w);
        let mut out = [0.0; 3];
        for a in start..start + w {
            let mut l = 1.0;
            for b in start..start + w {
                if a != b {
                    l *= (t - self.t[b]) / (self.t[a] - self.t[b]);
                }
            }
            let s = self.sample(a);
            for k in 0..3 {
                out[k] += l * s[k];
            }
        }
        out
    }

    /// `(Vλ, 𝕂, G_E Vλ)` at time `t`.
    pub fn at(&self, t: f64) -> Result<[f64; 3], JacobiError> {
        let (start, end) = (self.t[0], *self.t.last().expect("non-empty"));
        let slack = 1e-12 * (1.0 + end.abs());
        if !(t >= start - slack && t <= end + slack) {
            return Err(JacobiError::OutOfRange { t, start, end });
        }
        if self.t.len() == 1 {
            return Ok(self.sample(0));
        }
        let i = self.t.partition_point(|&s| s <= t).clamp(1, self.t.len() - 1) - 1;
        Ok(self.interpolate_in(i, t))
    }

    fn rk4(&self, beta: f64, u: [f64; 2], c: [[f64; 3]; 3], h: f64) -> [f64; 2] {
        let f = |c: [f64; 3], u: [f64; 2]| [u[1], c[0] * u[1] - (beta * c[1] - c[2]) * u[0]];
        let k1 = f(c[0], u);
        let k2 = f(c[1], [u[0] + 0.5 * h * k1[0], u[1] + 0.5 * h * k1[1]]);
        let k3 = f(c[1], [u[0] + 0.5 * h * k2[0], u[1] + 0.5 * h * k2[1]]);
        let k4 = f(c[2], [u[0] + h * k3[0], u[1] + h * k3[1]]);
        [
            u[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            u[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ]
    }

    fn step_interval(&self, beta: f64, i: usize, u: [f64; 2], forward: bool) -> [f64; 2] {
        let h = self.t[i + 1] - self.t[i];
        if forward {
            self.rk4(beta, u, [self.sample(i), self.mid[i], self.sample(i + 1)], h)
        } else {
            self.rk4(beta, u, [self.sample(i + 1), self.mid[i], self.sample(i)], -h)
        }
    }

    /// Partial RK4 step of signed size `s` from sample `i`.
    fn partial_step(&self, beta: f64, i: usize, u: [f64; 2], s: f64) -> Result<[f64; 2], JacobiError> {
        let t0 = self.t[i];
        let c = [self.sample(i), self.at(t0 + 0.5 * s)?, self.at(t0 + s)?];
        Ok(self.rk4(beta, u, c, s))
    }

    /// Solves from the first sample with `y = y0`, `ẏ = yd0`.
    pub fn solve(&self, beta: f64, y0: f64, yd0: f64) -> Result<BetaJacobiSolution, JacobiError> {
        self.solve_directed(beta, y0, yd0, true)
    }

    /// Solves backwards from the last sample with `y = y_end`, `ẏ = yd_end`.
    pub fn solve_backward(&self, beta: f64, y_end: f64, yd_end: f64) -> Result<BetaJacobiSolution, JacobiError> {
        self.solve_directed(beta, y_end, yd_end, false)
    }

    fn solve_directed(&self, beta: f64, y0: f64, yd0: f64, forward: bool) -> Result<BetaJacobiSolution, JacobiError> {
        if self.is_empty() {
            return Err(JacobiError::Invalid("orbit has no samples".into()));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(JacobiError::Invalid(format!("β must be finite and non-negative, got {beta}")));
        }
        let n = self.len();
        let mut y = vec![0.0; n];
        let mut yd = vec![0.0; n];
        let mut zeros = Vec::new();
        let start = if forward { 0 } else { n - 1 };
        y[start] = y0;
        yd[start] = yd0;
        let mut u = [y0, yd0];
        for step in 0..n - 1 {
            let (i, from, to) =
                if forward { (step, step, step + 1) } else { (n - 2 - step, n - 1 - step, n - 2 - step) };
            let next = self.step_interval(beta, i, u, forward);
            if u[0] * next[0] < 0.0 {
                zeros.push(self.locate_zero(beta, from, u, self.t[to] - self.t[from])?);
            }
            u = next;
            y[to] = u[0];
            yd[to] = u[1];
        }
        zeros.sort_by(f64::total_cmp);
        Ok(BetaJacobiSolution { beta, t: self.t.clone(), y, yd, zeros })
    }

    /// Zero of `y` inside the step of signed size `h` from sample `i`,
    /// bisected on partial RK4 steps.
    fn locate_zero(&self, beta: f64, i: usize, u: [f64; 2], h: f64) -> Result<f64, JacobiError> {
        let (mut lo, mut hi) = (0.0, h);
        let sign0 = u[0].signum();
        for _ in 0..80 {
            if (hi - lo).abs() <= 1e-12 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let v = self.partial_step(beta, i, u, mid)?;
            if v[0] * sign0 > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(self.t[i] + 0.5 * (lo + hi))
    }

    /// True when the solution with `y(0) = 0`, `ẏ(0) = 1` changes sign.
    pub fn has_conjugate(&self, beta: f64) -> bool {
        let mut u = [0.0, 1.0];
        for i in 0..self.len().saturating_sub(1) {
            let next = self.step_interval(beta, i, u, true);
            if u[0] * next[0] < 0.0 {
                return true;
            }
            u = next;
        }
        false
    }

    /// `∫ Vλ dt` from the first sample to every sample (Simpson per interval).
    fn integrated_v_lambda(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for i in 0..self.len().saturating_sub(1) {
            let h = self.t[i + 1] - self.t[i];
            out[i + 1] = out[i] + h / 6.0 * (self.v_lambda[i] + 4.0 * self.mid[i][0] + self.v_lambda[i + 1]);
        }
        out
    }
}

/// Solution of the β-Jacobi equation sampled at the orbit times.
#[derive(Debug, Clone, Serialize)]
pub struct BetaJacobiSolution {
    pub beta: f64,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub yd: Vec<f64>,
    /// Sign changes of `y`, located to `1e-12` in time.
    pub zeros: Vec<f64>,
}

impl BetaJacobiSolution {
    pub fn first_zero(&self) -> Option<f64> {
        self.zeros.first().copied()
    }
}

/// Solves along an orbit recorded with [`Record::Full`].
pub fn beta_jacobi(orbit: &ThermostatOrbit, beta: f64, y0: f64, yd0: f64) -> Result<BetaJacobiSolution, JacobiError> {
    JacobiCoefficients::from_orbit(orbit).solve(beta, y0, yd0)
}

/// Largest deviation of `W = y₁ẏ₂ - y₂ẏ₁` from `W(0) exp∫Vλ`, relative to
/// `max |W|`, for the solutions with data `(0, 1)` and `(1, 0)`.
pub fn wronskian_residual(coeffs: &JacobiCoefficients, beta: f64) -> Result<f64, JacobiError> {
    let a = coeffs.solve(beta, 0.0, 1.0)?;
    let b = coeffs.solve(beta, 1.0, 0.0)?;
    let integral = coeffs.integrated_v_lambda();
    let w: Vec<f64> = (0..coeffs.len()).map(|i| a.y[i] * b.yd[i] - b.y[i] * a.yd[i]).collect();
    let scale = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = (0..w.len()).map(|i| (w[i] - w[0] * integral[i].exp()).abs()).fold(0.0, f64::max);
    Ok(worst / scale.max(f64::MIN_POSITIVE))
}

/// One fan orbit of a conjugate-point scan.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConjugateRecord {
    pub exit: FanExit,
    pub orbit_length: f64,
    pub first_conjugate: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConjugateScan {
    pub beta: f64,
    pub fan: Fan,
    pub records: Vec<ConjugateRecord>,
}

impl ConjugateScan {
    pub fn conjugate_count(&self) -> usize {
        self.records.iter().filter(|r| r.first_conjugate.is_some()).count()
    }

    pub fn is_conjugate_free(&self) -> bool {
        self.conjugate_count() == 0
    }

    pub fn first_conjugate_times(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.first_conjugate).collect()
    }

    pub fn exits(&self) -> Vec<FanExit> {
        self.records.iter().map(|r| r.exit).collect()
    }

    /// CSV: `boundary_index,angle_index,psi,theta,orbit_length,exited,first_conjugate`
    /// with an empty last field when there is no conjugate point.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "boundary_index,angle_index,psi,theta,orbit_length,exited,first_conjugate")?;
        for r in &self.records {
            let e = &r.exit.entry;
            let conj = r.first_conjugate.map(|t| t.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.boundary_index,
                e.angle_index,
                e.psi,
                e.theta + 0.0,
                r.orbit_length,
                r.exit.exit_time.is_some(),
                conj
            )?;
        }
        Ok(())
    }
}

fn fan_orbit(flow: &ThermostatFlow, entry: &FanEntry) -> Result<(FanExit, JacobiCoefficients), JacobiError> {
    let orbit = flow.integrate(entry.state, flow.t_cap, Record::Full)?;
    let exit_time = match orbit.termination {
        Termination::BoundaryExit => Some(orbit.duration()),
        Termination::Tmax => None,
        Termination::StepFailure => return Err(FlowError::StepFailure { t: orbit.duration() }.into()),
    };
    Ok((FanExit { entry: *entry, exit_time, exit: orbit.end() }, JacobiCoefficients::from_orbit(&orbit)))
}

/// First β-conjugate time along every fan orbit, from `y(0) = 0`, `ẏ(0) = 1`.
pub fn conjugate_scan(flow: &ThermostatFlow, beta: f64, fan: &Fan) -> Result<ConjugateScan, JacobiError> {
    let radius = flow.radius().ok_or(FlowError::NotDisk)?;
    let records = fan
        .entries(radius)
        .par_iter()
        .map(|e| {
            let (exit, coeffs) = fan_orbit(flow, e)?;
            let sol = coeffs.solve(beta, 0.0, 1.0)?;
            Ok(ConjugateRecord { exit, orbit_length: coeffs.duration(), first_conjugate: sol.first_zero() })
        })
        .collect::<Result<Vec<_>, JacobiError>>()?;
    Ok(ConjugateScan { beta, fan: *fan, records })
}

/// First conjugate time of the linearised flow: the component of
/// `dπ dφ_t(V)` along `iv`, with no use of the along-orbit scalars.
pub fn direct_conjugate_time(flow: &ThermostatFlow, start: State, tmax: f64) -> Result<Option<f64>, JacobiError> {
    let path = flow.integrate_variational(start, [0.0, 0.0, 1.0], tmax)?;
    let normal = |(_, s, d): &(f64, State, [f64; 3])| -> Result<f64, JacobiError> {
        let rho = flow.chart().rho.value.eval(s.x, s.y)?;
        Ok(rho.exp() * (-s.phi.sin() * d[0] + s.phi.cos() * d[1]))
    };
    let ys = path.iter().map(normal).collect::<Result<Vec<_>, _>>()?;
    for i in 1..ys.len().saturating_sub(1) {
        if ys[i] * ys[i + 1] < 0.0 {
            // quadratic through three samples around the sign change
            let j = if i + 2 < ys.len() { i } else { i - 1 };
            let (t0, t1, t2) = (path[j].0, path[j + 1].0, path[j + 2].0);
            let (a, b, c) = (ys[j], ys[j + 1], ys[j + 2]);
            let p = |t: f64| {
                a * (t - t1) * (t - t2) / ((t0 - t1) * (t0 - t2))
                    + b * (t - t0) * (t - t2) / ((t1 - t0) * (t1 - t2))
                    + c * (t - t0) * (t - t1) / ((t2 - t0) * (t2 - t1))
            };
            let (mut lo, mut hi) = (path[i].0, path[i + 1].0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if p(mid) * ys[i] > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Ok(Some(0.5 * (lo + hi)));
        }
    }
    Ok(None)
}

/// Direct-route first conjugate times for every fan orbit.
pub fn conjugate_scan_direct(flow: &ThermostatFlow, fan: &Fan) -> Result<Vec<Option<f64>>, JacobiError> {
    let radius = flow.radius().ok_or(FlowError::NotDisk)?;
    fan.entries(radius).par_iter().map(|e| direct_conjugate_time(flow, e.state, flow.t_cap)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TerminatorEstimate {
    pub beta_hat: f64,
    /// No conjugate point was found even at `β_max`.
    pub capped: bool,
    pub beta_max: f64,
    pub tol: f64,
    pub fan: Fan,
    /// Fan entry whose orbit attains the estimate.
    pub limiting_entry: Option<FanEntry>,
}

/// Bisection for the largest conjugate-free `β ∈ [0, β_max]`. Each orbit's
/// own threshold is bisected to `tol` and the estimate is their minimum,
/// which equals the largest β for which the whole scan is empty.
pub fn terminator_estimate(
    flow: &ThermostatFlow,
    fan: &Fan,
    beta_max: f64,
    tol: f64,
) -> Result<TerminatorEstimate, JacobiError> {
    if !(beta_max >= 0.0 && beta_max.is_finite()) || !(tol > 0.0) {
        return Err(JacobiError::Invalid("need finite β_max ≥ 0 and tol > 0".into()));
    }
    let radius = flow.radius().ok_or(FlowError::NotDisk)?;
    let capped_result = |limiting| TerminatorEstimate {
        beta_hat: beta_max,
        capped: true,
        beta_max,
        tol,
        fan: *fan,
        limiting_entry: limiting,
    };
    if beta_max == 0.0 {
        return Ok(capped_result(None));
    }
    let thresholds = fan
        .entries(radius)
        .par_iter()
        .map(|e| {
            let (_, coeffs) = fan_orbit(flow, e)?;
            if !coeffs.has_conjugate(beta_max) {
                return Ok(None);
            }
            if coeffs.has_conjugate(0.0) {
                return Ok(Some((0.0, *e)));
            }
            let (mut lo, mut hi) = (0.0, beta_max);
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                if coeffs.has_conjugate(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(Some((lo, *e)))
        })
        .collect::<Result<Vec<_>, JacobiError>>()?;
    let best = thresholds.into_iter().flatten().min_by(|a, b| a.0.total_cmp(&b.0));
    Ok(match best {
        None => capped_result(None),
        Some((beta_hat, e)) => {
            TerminatorEstimate { beta_hat, capped: false, beta_max, tol, fan: *fan, limiting_entry: Some(e) }
        }
    })
}

/// Radii of the two enlarged disks, as multiples of the chart radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Nesting {
    pub inner: f64,
    pub outer: f64,
}

impl Default for Nesting {
    fn default() -> Self {
        Nesting { inner: 1.1, outer: 1.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RiccatiBranch {
    Plus,
    Minus,
}

/// Pointwise Riccati solutions on a disk chart.
///
/// `r⁺` at `z` is `ẏ/y` for the Jacobi solution vanishing where the
/// backward orbit through `z` crosses the outer circle. `r⁻` is `ẏ/y` for
/// the solution vanishing where the forward orbit leaves the inner circle.
/// Both are computed by integrating the Jacobi equation backwards towards
/// `z`; the flip symmetry turns the backward orbit into a forward one.
#[derive(Debug, Clone)]
pub struct RiccatiSolver {
    pub beta: f64,
    pub radius: f64,
    pub nesting: Nesting,
    base: ThermostatFlow,
    inner: ThermostatFlow,
    outer: ThermostatFlow,
}

impl RiccatiSolver {
    pub fn new(
        chart: &IsothermalChart,
        field: &ExternalField,
        nesting: Nesting,
        beta: f64,
        step: Option<f64>,
    ) -> Result<Self, JacobiError> {
        let radius = chart.radius().ok_or(FlowError::NotDisk)?;
        if !(1.0 < nesting.inner && nesting.inner < nesting.outer) {
            return Err(JacobiError::Invalid("nesting needs 1 < inner < outer".into()));
        }
        let enlarged = |factor: f64| -> Result<ThermostatFlow, JacobiError> {
            let c = chart.with_domain(Domain::Disk { radius: factor * radius })?;
            field.validate(&c)?;
            let flow = ThermostatFlow::new(&c, field)?;
            Ok(match step {
                Some(h) => flow.with_step(h)?,
                None => flow,
            })
        };
        let base = ThermostatFlow::new(chart, field)?;
        Ok(RiccatiSolver {
            beta,
            radius,
            nesting,
            base,
            inner: enlarged(nesting.inner)?,
            outer: enlarged(nesting.outer)?,
        })
    }

    pub fn base_flow(&self) -> &ThermostatFlow {
        &self.base
    }

    pub fn inner_flow(&self) -> &ThermostatFlow {
        &self.inner
    }

    pub fn outer_flow(&self) -> &ThermostatFlow {
        &self.outer
    }

    /// `ẏ(0)/y(0)` for the solution along `orbit` vanishing at its end.
    fn ratio_from_end(&self, orbit: &ThermostatOrbit, slope: f64, s: State) -> Result<f64, JacobiError> {
        let coeffs = JacobiCoefficients::from_orbit(orbit);
        let sol = coeffs.solve_backward(self.beta, 0.0, slope)?;
        if !sol.zeros.is_empty() || sol.y[0] == 0.0 {
            return Err(JacobiError::ConjugatePoint { x: s.x, y: s.y, phi: s.phi });
        }
        Ok(sol.yd[0] / sol.y[0])
    }

    pub fn r_plus(&self, s: State) -> Result<f64, JacobiError> {
        let orbit = self.outer.exit_orbit(s.flipped(), Record::Full)?;
        // along the flipped orbit w(s) = y(-s), so ẏ = -w'
        Ok(-self.ratio_from_end(&orbit, -1.0, s)?)
    }

    pub fn r_minus(&self, s: State) -> Result<f64, JacobiError> {
        let orbit = self.inner.exit_orbit(s, Record::Full)?;
        self.ratio_from_end(&orbit, 1.0, s)
    }

    pub fn r(&self, branch: RiccatiBranch, s: State) -> Result<f64, JacobiError> {
        match branch {
            RiccatiBranch::Plus => self.r_plus(s),
            RiccatiBranch::Minus => self.r_minus(s),
        }
    }

    /// `G_E r + r² - Vλ r + β𝕂 - G_E Vλ` at `s`, with `G_E r` from a
    /// five-point difference of `r` along the orbit with spacing `delta`.
    pub fn residual_at(&self, branch: RiccatiBranch, s: State, delta: f64) -> Result<f64, JacobiError> {
        let shifted = |k: f64| -> Result<f64, JacobiError> { self.r(branch, self.base.rk4_step(s, k * delta)?) };
        let r0 = self.r(branch, s)?;
        let d = (shifted(-2.0)? - 8.0 * shifted(-1.0)? + 8.0 * shifted(1.0)? - shifted(2.0)?) / (12.0 * delta);
        let c = self.base.scalars(s)?;
        Ok(d + r0 * r0 - c.v_lambda * r0 + self.beta * c.kthermo - c.ge_v_lambda)
    }

    /// Samples one branch on `grid × nphi` fiber angles `φ_j = 2πj/nphi`
    /// at the nodes selected by `include`; other nodes hold `NaN`.
    pub fn field(
        &self,
        branch: RiccatiBranch,
        grid: &Arc<Grid2>,
        nphi: usize,
        include: impl Fn(usize, f64, f64) -> bool + Sync,
    ) -> Result<RiccatiField, JacobiError> {
        let points: Vec<(usize, f64, f64)> = grid.points().collect();
        let values = points
            .par_iter()
            .map(|&(idx, x, y)| {
                let mut row = vec![f64::NAN; nphi];
                if include(idx, x, y) {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = self.r(branch, State::new(x, y, 2.0 * PI * j as f64 / nphi as f64))?;
                    }
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>, JacobiError>>()?
            .concat();
        Ok(RiccatiField { branch, beta: self.beta, nesting: self.nesting, grid: grid.clone(), nphi, values })
    }
}

/// Samples of `r⁺` or `r⁻` on a spatial grid times `nphi` fiber angles,
/// stored as `values[idx * nphi + j]`; `NaN` where not computed.
#[derive(Debug, Clone)]
pub struct RiccatiField {
    pub branch: RiccatiBranch,
    pub beta: f64,
    pub nesting: Nesting,
    pub grid: Arc<Grid2>,
    pub nphi: usize,
    pub values: Vec<f64>,
}

impl RiccatiField {
    pub fn at_node(&self, idx: usize, j: usize) -> f64 {
        self.values[idx * self.nphi + j]
    }

    /// Trilinear interpolation in `(x, y, φ)`; `None` outside the grid or
    /// next to an uncomputed node.
    pub fn interpolate(&self, x: f64, y: f64, phi: f64) -> Option<f64> {
        let g = &self.grid;
        let fx = (x - g.xs[0]) / g.dx;
        let fy = (y - g.ys[0]) / g.dy;
        if !(fx >= 0.0 && fy >= 0.0 && fx <= (g.nx - 1) as f64 && fy <= (g.ny - 1) as f64) {
            return None;
        }
        let i = (fx.floor() as usize).min(g.nx - 2);
        let j = (fy.floor() as usize).min(g.ny - 2);
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        let fp = phi.rem_euclid(2.0 * PI) / (2.0 * PI) * self.nphi as f64;
        let k = (fp.floor() as usize).min(self.nphi - 1);
        let tp = fp - k as f64;
        let k1 = (k + 1) % self.nphi;
        let mut acc = 0.0;
        for (di, wx) in [(0, 1.0 - tx), (1, tx)] {
            for (dj, wy) in [(0, 1.0 - ty), (1, ty)] {
                let idx = g.index(i + di, j + dj);
                for (kk, wp) in [(k, 1.0 - tp), (k1, tp)] {
                    let v = self.at_node(idx, kk);
                    if v.is_nan() {
                        return None;
                    }
                    acc += wx * wy * wp * v;
                }
            }
        }
        Some(acc)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RiccatiOptions {
    pub nesting: Nesting,
    pub beta: f64,
    /// Grid nodes per axis over the bounding square of the disk.
    pub n: usize,
    pub nphi: usize,
    /// RK4 step of the enlarged flows; `None` keeps the default.
    pub step: Option<f64>,
    /// When set, both enlargements must pass [`crate::flow::simplicity_check`] with this fan.
    pub simplicity_fan: Option<Fan>,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        RiccatiOptions { nesting: Nesting::default(), beta: 1.0, n: 17, nphi: 16, step: None, simplicity_fan: None }
    }
}

#[derive(Debug, Clone)]
pub struct RiccatiSolutions {
    pub plus: RiccatiField,
    pub minus: RiccatiField,
    /// `min(r⁺ - r⁻)` over grid nodes inside the disk.
    pub min_separation: f64,
    pub argmin: State,
}

/// `r⁺` and `r⁻` on a grid over the disk. Nodes outside the disk but within
/// one cell diagonal of it are filled too, so interpolation works up to the
/// boundary.
pub fn riccati_solutions(
    chart: &IsothermalChart,
    field: &ExternalField,
    opts: &RiccatiOptions,
) -> Result<RiccatiSolutions, JacobiError> {
    let radius = chart.radius().ok_or(FlowError::NotDisk)?;
    let solver = RiccatiSolver::new(chart, field, opts.nesting, opts.beta, opts.step)?;
    if let Some(fan) = &opts.simplicity_fan {
        for factor in [opts.nesting.inner, opts.nesting.outer] {
            let c = chart.with_domain(Domain::Disk { radius: factor * radius })?;
            let report = crate::flow::simplicity_check(&c, field, fan)?;
            if !report.simple {
                return Err(JacobiError::Hypothesis(format!(
                    "enlargement {factor}R is not simple: {}",
                    report.verdict
                )));
            }
        }
    }
    let grid = Grid2::new(Domain::Disk { radius }, opts.n, opts.n);
    let reach = radius + grid.dx.hypot(grid.dy);
    let limit = (reach.min(0.999 * opts.nesting.inner * radius)).powi(2);
    let include = |_: usize, x: f64, y: f64| x * x + y * y <= limit;
    let plus = solver.field(RiccatiBranch::Plus, &grid, opts.nphi, include)?;
    let minus = solver.field(RiccatiBranch::Minus, &grid, opts.nphi, include)?;
    let mut min_separation = f64::INFINITY;
    let mut argmin = State::new(0.0, 0.0, 0.0);
    for (idx, x, y) in grid.points() {
        if !grid.mask[idx] {
            continue;
        }
        for j in 0..opts.nphi {
            let d = plus.at_node(idx, j) - minus.at_node(idx, j);
            if d < min_separation {
                min_separation = d;
                argmin = State::new(x, y, 2.0 * PI * j as f64 / opts.nphi as f64);
            }
        }
    }
    Ok(RiccatiSolutions { plus, minus, min_separation, argmin })
}

#[derive(Debug, Clone, Serialize)]
pub struct RiccatiResidual {
    pub probes: usize,
    pub points: usize,
    pub plus_sup: f64,
    pub minus_sup: f64,
}

/// Riccati residual of both branches at points along `probes` random
/// orbits inside the disk.
pub fn riccati_residual(
    solver: &RiccatiSolver,
    probes: usize,
    points_per_probe: usize,
    delta: f64,
    rng: &mut impl Rng,
) -> Result<RiccatiResidual, JacobiError> {
    let r0 = 0.9 * solver.radius;
    let mut points = Vec::with_capacity(probes * points_per_probe);
    for _ in 0..probes {
        let rad = r0 * rng.gen_range(0.0f64..1.0).sqrt();
        let ang = rng.gen_range(0.0..2.0 * PI);
        let phi = rng.gen_range(0.0..2.0 * PI);
        let orbit = solver.base.exit_orbit(State::new(rad * ang.cos(), rad * ang.sin(), phi), Record::States)?;
        let n = orbit.samples.len();
        for k in 0..points_per_probe {
            let i = (n - 1) * k / points_per_probe.max(1);
            points.push(orbit.samples[i].state);
        }
    }
    let res = points
        .par_iter()
        .map(|&s| {
            Ok((
                solver.residual_at(RiccatiBranch::Plus, s, delta)?.abs(),
                solver.residual_at(RiccatiBranch::Minus, s, delta)?.abs(),
            ))
        })
        .collect::<Result<Vec<_>, JacobiError>>()?;
    Ok(RiccatiResidual {
        probes,
        points: res.len(),
        plus_sup: res.iter().map(|r| r.0).fold(0.0, f64::max),
        minus_sup: res.iter().map(|r| r.1).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AlphaOptions {
    /// Fan over the outer enlargement used for the conjugate-point premise.
    pub fan: Fan,
    pub nesting: Nesting,
    /// Frame grid nodes per axis.
    pub n: usize,
    pub nphi: usize,
    pub step: Option<f64>,
    pub trials: usize,
    pub seed: u64,
    pub identity_tol: f64,
}

impl Default for AlphaOptions {
    fn default() -> Self {
        AlphaOptions {
            fan: Fan::default(),
            nesting: Nesting::default(),
            n: 25,
            nphi: 24,
            step: None,
            trials: 50,
            seed: 0,
            identity_tol: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AlphaCertificate {
    pub beta: f64,
    /// `(β - 1)/β`.
    pub alpha: f64,
    /// `‖G_E φ‖² - β(𝕂φ, φ)` for the quadrature test function.
    pub identity_lhs: f64,
    /// `‖G_E φ - rφ + Vλ φ‖²` with `r = r⁺` of the β-Jacobi equation.
    pub identity_rhs: f64,
    pub identity_residual: f64,
    pub identity_pass: bool,
    pub trials: usize,
    /// `min (‖G_E φ‖² - (𝕂φ, φ) - α‖G_E φ‖²)/‖G_E φ‖²` over the trials.
    pub empirical_min_margin: f64,
    pub empirical_pass: bool,
    /// `min (‖G_E φ‖² - (𝕂φ, φ))/(‖G_E φ‖² + ‖φ‖²)` over the trials.
    pub alpha_estimate: f64,
}

/// α-control certificate from the absence of β-conjugate points.
pub fn alpha_certificate(
    chart: &IsothermalChart,
    field: &ExternalField,
    beta: f64,
    opts: &AlphaOptions,
) -> Result<AlphaCertificate, JacobiError> {
    let radius = chart.radius().ok_or(FlowError::NotDisk)?;
    if !(beta >= 1.0 && beta.is_finite()) {
        return Err(JacobiError::Hypothesis(format!("α = (β-1)/β lies in [0, 1] only for β ≥ 1, got β = {beta}")));
    }
    let solver = RiccatiSolver::new(chart, field, opts.nesting, beta, opts.step)?;
    let scan = conjugate_scan(solver.outer_flow(), beta, &opts.fan)?;
    if let Some(r) = scan.records.iter().find(|r| r.first_conjugate.is_some()) {
        let s = r.exit.entry.state;
        return Err(JacobiError::ConjugatePoint { x: s.x, y: s.y, phi: s.phi });
    }
    let alpha = (beta - 1.0) / beta;
    let frame = ThermostatFrame::new(&chart.with_resolution(opts.n, opts.n)?, field)?;
    let grid = frame.grid.clone();
    let mut rng = crate::random::rng(opts.seed);
    let spec = |rng: &mut rand_chacha::ChaCha8Rng| {
        PhaseSpec::random(rng, Domain::Disk { radius }, &[0, 1, 2], 2, 1.0).realified().sample(&grid)
    };

    // identity by quadrature with r⁺ at the grid nodes
    let phi = spec(&mut rng);
    let g_phi = frame.g_e(&phi)?;
    let nphi = opts.nphi;
    let r =
        solver.field(RiccatiBranch::Plus, &grid, nphi, |idx, _, _| phi.modes().any(|(_, h)| h[idx].norm() > 0.0))?;
    let ps = phi.samples(nphi)?;
    let gs = g_phi.samples(nphi)?;
    let vs = frame.v_lambda().samples(nphi)?;
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for idx in 0..grid.len() {
        let w = frame.weights()[idx] / nphi as f64;
        if w == 0.0 {
            continue;
        }
        let k = frame.thermostat_curvature[idx];
        for j in 0..nphi {
            let m = idx * nphi + j;
            if ps[m].norm() == 0.0 {
                lhs += w * gs[m].norm_sqr();
                rhs += w * gs[m].norm_sqr();
                continue;
            }
            let rv = r.at_node(idx, j);
            lhs += w * (gs[m].norm_sqr() - beta * k * ps[m].norm_sqr());
            rhs += w * (gs[m] - ps[m] * rv + vs[m] * ps[m]).norm_sqr();
        }
    }
    let identity_residual = (lhs - rhs).abs() / rhs.abs().max(f64::MIN_POSITIVE);

    let mut empirical_min_margin = f64::INFINITY;
    let mut alpha_estimate = f64::INFINITY;
    for _ in 0..opts.trials {
        let phi = spec(&mut rng);
        let g = frame.norm_sq(&frame.g_e(&phi)?)?;
        let kk = frame.inner_product(&frame.mul_thermostat_curvature(&phi), &phi)?.re;
        let n2 = frame.norm_sq(&phi)?;
        empirical_min_margin = empirical_min_margin.min((g - kk - alpha * g) / g);
        alpha_estimate = alpha_estimate.min((g - kk) / (g + n2));
    }
    Ok(AlphaCertificate {
        beta,
        alpha,
        identity_lhs: lhs,
        identity_rhs: rhs,
        identity_residual,
        identity_pass: identity_residual <= opts.identity_tol,
        trials: opts.trials,
        empirical_min_margin,
        empirical_pass: empirical_min_margin >= -1e-12,
        alpha_estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprfield::parse;

    fn disk(rho: &str, radius: f64) -> IsothermalChart {
        IsothermalChart::new(Domain::Disk { radius }, parse(rho).unwrap(), 17, 17).unwrap()
    }

    #[test]
    fn flat_solutions_are_linear() {
        let flow = ThermostatFlow::new(&disk("0", 1.0), &ExternalField::zero()).unwrap();
        let orbit = flow.integrate_orbit(-0.5, 0.1, 0.2, 0.9).unwrap();
        for beta in [0.0, 1.0, 3.0] {
            let sol = beta_jacobi(&orbit, beta, 0.3, -0.7).unwrap();
            for (t, y) in sol.t.iter().zip(&sol.y) {
                assert!((y - (0.3 - 0.7 * t)).abs() < 1e-13);
            }
            assert_eq!(sol.zeros.len(), 1);
            assert!((sol.zeros[0] - 0.3 / 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_solution_is_sine() {
        let flow = ThermostatFlow::new(&disk("log(2/(1+x^2+y^2))", 3.0), &ExternalField::zero()).unwrap();
        let orbit = flow.integrate_orbit(-2.5, 0.0, 0.0, 4.0).unwrap();
        let sol = beta_jacobi(&orbit, 1.0, 0.0, 1.0).unwrap();
        for (t, y) in sol.t.iter().zip(&sol.y) {
            assert!((y - t.sin()).abs() < 1e-8, "t={t}");
        }
        assert!((sol.zeros[0] - PI).abs() < 1e-8);
        let back = JacobiCoefficients::from_orbit(&orbit).solve_backward(1.0, 4.0f64.sin(), 4.0f64.cos()).unwrap();
        assert!(back.y[0].abs() < 1e-8 && (back.yd[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn interpolation_is_cubic_exact() {
        let mut c = JacobiCoefficients {
            t: vec![0.0, 0.1, 0.25, 0.3, 0.5],
            v_lambda: vec![],
            kthermo: vec![],
            ge_v_lambda: vec![],
            mid: vec![],
        };
        let f = |t: f64| 1.0 - 2.0 * t + t * t * t;
        c.v_lambda = c.t.iter().map(|&t| f(t)).collect();
        c.kthermo = c.v_lambda.clone();
        c.ge_v_lambda = c.v_lambda.clone();
        for t in [0.0, 0.05, 0.2, 0.41, 0.5] {
            assert!((c.at(t).unwrap()[0] - f(t)).abs() < 1e-14);
        }
        assert!(matches!(c.at(0.6), Err(JacobiError::OutOfRange { .. })));
    }

    #[test]
    fn field_interpolation_is_trilinear() {
        let grid = Grid2::new(Domain::Disk { radius: 1.0 }, 5, 5);
        let nphi = 8;
        let mut values = Vec::new();
        for (_, x, y) in grid.points() {
            for j in 0..nphi {
                values.push(1.0 + 2.0 * x - y + 0.5 * j as f64);
            }
        }
        let f =
            RiccatiField { branch: RiccatiBranch::Plus, beta: 1.0, nesting: Nesting::default(), grid, nphi, values };
        let dphi = 2.0 * PI / nphi as f64;
        let v = f.interpolate(0.1, -0.3, 2.5 * dphi).unwrap();
        assert!((v - (1.0 + 0.2 + 0.3 + 1.25)).abs() < 1e-12);
        assert!(f.interpolate(1.5, 0.0, 0.0).is_none());
    }
}
