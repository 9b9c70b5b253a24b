//! Thermostat orbits in an isothermal chart.
//!
//! The state is `(x, y, φ)` with unit velocity `v = e^{-ρ}(cos φ, sin φ)`,
//! so `|v|_g = 1` holds by construction. Integration is fixed-step RK4;
//! boundary exits on a disk are located by bisection on a partial final
//! step.

use std::f64::consts::PI;
use std::io::{self, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::exprfield::{EvalError, FieldExpr, Tape, Var};
use crate::grid::Domain;
use crate::jacobi::{conjugate_scan, JacobiError};
use crate::surface::{
    boundary_convexity, ChartPoint, ConvexityReport, ExternalField, FieldPoint, IsothermalChart, CONVEXITY_SAMPLES,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("expression evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("operation requires a disk chart")]
    NotDisk,
    #[error("initial point ({x}, {y}) is outside the domain")]
    OutsideDomain { x: f64, y: f64 },
    #[error("orbit left the domain at t = {t} before reaching t = {requested}")]
    LeftDomain { t: f64, requested: f64 },
    #[error("orbit did not exit before the time cap {t_cap}")]
    NoExit { t_cap: f64 },
    #[error("integration failed at t = {t}")]
    StepFailure { t: f64 },
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

/// Default RK4 step.
pub const DEFAULT_STEP: f64 = 1e-3;
/// The time cap is this multiple of the chart's metric diameter bound.
pub const T_CAP_DIAMETERS: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct State {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
}

impl State {
    pub fn new(x: f64, y: f64, phi: f64) -> Self {
        State { x, y, phi }
    }

    /// `(x, v) ↦ (x, -v)`.
    pub fn flipped(self) -> Self {
        State { phi: self.phi + PI, ..self }
    }
}

/// Along-orbit scalars of the thermostat.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct OrbitScalars {
    pub lambda: f64,
    pub v_lambda: f64,
    pub kthermo: f64,
    pub ge_v_lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrbitSample {
    pub t: f64,
    pub state: State,
    pub scalars: OrbitScalars,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Tmax,
    BoundaryExit,
    StepFailure,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThermostatOrbit {
    pub samples: Vec<OrbitSample>,
    pub termination: Termination,
}

impl ThermostatOrbit {
    pub fn duration(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t)
    }

    pub fn start(&self) -> State {
        self.samples[0].state
    }

    pub fn end(&self) -> State {
        self.samples.last().expect("orbit has samples").state
    }

    /// Orbit CSV: `t,x,y,phi,lambda,Vlambda,Kthermo`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,x,y,phi,lambda,Vlambda,Kthermo")?;
        // `+ 0.0` prints negative zeros as 0
        for s in &self.samples {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.t + 0.0,
                s.state.x + 0.0,
                s.state.y + 0.0,
                s.state.phi + 0.0,
                s.scalars.lambda + 0.0,
                s.scalars.v_lambda + 0.0,
                s.scalars.kthermo + 0.0
            )?;
        }
        Ok(())
    }
}

/// What moves the fiber angle besides the geodesic term.
#[derive(Debug, Clone)]
pub enum Forcing {
    /// `λ = ⟨E, iv⟩`.
    Thermostat,
    /// `λ` a prescribed function of the base point (magnetic flow).
    Magnetic(FieldExpr),
}

/// Which samples to keep while integrating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    /// Every step, with along-orbit scalars.
    Full,
    /// Every step, states only.
    States,
    /// Start and end only.
    Endpoints,
}

/// Thermostat flow on a chart with a fixed RK4 step and time cap.
#[derive(Debug, Clone)]
pub struct ThermostatFlow {
    chart: IsothermalChart,
    field: ExternalField,
    forcing: Forcing,
    pub step: f64,
    pub t_cap: f64,
    field_zero: bool,
    /// `ρ, ρ_x, ρ_y, E1, E2` and, for magnetic forcing, `λ`.
    local_tape: Arc<Tape>,
    /// `ρ, ρ_x, ρ_y, ρ_xx, ρ_yy, E1, E2, E1_x, E1_y, E2_x, E2_y, ρ_xy`.
    scalar_tape: Arc<Tape>,
}

#[derive(Debug, Clone, Copy)]
struct Local {
    rho: f64,
    rho_x: f64,
    rho_y: f64,
    e1: f64,
    e2: f64,
    magnetic: f64,
}

impl ThermostatFlow {
    pub fn new(chart: &IsothermalChart, field: &ExternalField) -> Result<Self, FlowError> {
        ThermostatFlow::build(chart, field, Forcing::Thermostat)
    }

    /// Flow with `φ̇ = (geodesic term) + λ(x, y)`.
    pub fn magnetic(chart: &IsothermalChart, lambda: FieldExpr) -> Result<Self, FlowError> {
        ThermostatFlow::build(chart, &ExternalField::zero(), Forcing::Magnetic(lambda))
    }

    fn build(chart: &IsothermalChart, field: &ExternalField, forcing: Forcing) -> Result<Self, FlowError> {
        let t_cap = default_t_cap(chart)?;
        let r = &chart.rho;
        let mut local = vec![&r.value, &r.dx, &r.dy, &field.e1, &field.e2];
        if let Forcing::Magnetic(expr) = &forcing {
            local.push(expr);
        }
        let local_tape = Arc::new(Tape::compile(&local));
        let rho_xy = r.dx.differentiate(Var::Y);
        let scalar_tape = Arc::new(Tape::compile(&[
            &r.value,
            &r.dx,
            &r.dy,
            &r.dxx,
            &r.dyy,
            &field.e1,
            &field.e2,
            &field.e1_x,
            &field.e1_y,
            &field.e2_x,
            &field.e2_y,
            &rho_xy,
        ]));
        Ok(ThermostatFlow {
            chart: chart.clone(),
            field: field.clone(),
            forcing,
            step: DEFAULT_STEP,
            t_cap,
            field_zero: field.is_zero(),
            local_tape,
            scalar_tape,
        })
    }

    pub fn chart(&self) -> &IsothermalChart {
        &self.chart
    }

    pub fn field(&self) -> &ExternalField {
        &self.field
    }

    pub fn forcing(&self) -> &Forcing {
        &self.forcing
    }

    pub fn with_step(mut self, step: f64) -> Result<Self, FlowError> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(FlowError::Invalid(format!("step must be positive, got {step}")));
        }
        self.step = step;
        Ok(self)
    }

    pub fn with_t_cap(mut self, t_cap: f64) -> Result<Self, FlowError> {
        if !(t_cap > 0.0) {
            return Err(FlowError::Invalid(format!("time cap must be positive, got {t_cap}")));
        }
        self.t_cap = t_cap;
        Ok(self)
    }

    pub fn radius(&self) -> Option<f64> {
        self.chart.radius()
    }

    #[inline]
    fn local(&self, x: f64, y: f64) -> Result<Local, EvalError> {
        let mut v = [0.0; 6];
        self.local_tape.eval_into(x, y, &mut v[..self.local_tape.n_outputs()])?;
        Ok(Local { rho: v[0], rho_x: v[1], rho_y: v[2], e1: v[3], e2: v[4], magnetic: v[5] })
    }

    /// `λ` at a state.
    pub fn lambda(&self, s: State) -> Result<f64, EvalError> {
        match &self.forcing {
            Forcing::Thermostat => {
                if self.field_zero {
                    return Ok(0.0);
                }
                let l = self.local(s.x, s.y)?;
                Ok(l.rho.exp() * (-l.e1 * s.phi.sin() + l.e2 * s.phi.cos()))
            }
            Forcing::Magnetic(_) => Ok(self.local(s.x, s.y)?.magnetic),
        }
    }

    #[inline]
    fn rhs(&self, s: State) -> Result<[f64; 3], EvalError> {
        let l = self.local(s.x, s.y)?;
        let (sn, cs) = s.phi.sin_cos();
        let w = (-l.rho).exp();
        let lambda = match &self.forcing {
            Forcing::Thermostat => l.rho.exp() * (-l.e1 * sn + l.e2 * cs),
            Forcing::Magnetic(_) => l.magnetic,
        };
        Ok([w * cs, w * sn, w * (-l.rho_x * sn + l.rho_y * cs) + lambda])
    }

    /// One classical RK4 step of size `h`.
    pub fn rk4_step(&self, s: State, h: f64) -> Result<State, EvalError> {
        let add = |s: State, k: [f64; 3], a: f64| State { x: s.x + a * k[0], y: s.y + a * k[1], phi: s.phi + a * k[2] };
        let k1 = self.rhs(s)?;
        let k2 = self.rhs(add(s, k1, 0.5 * h))?;
        let k3 = self.rhs(add(s, k2, 0.5 * h))?;
        let k4 = self.rhs(add(s, k3, h))?;
        Ok(State {
            x: s.x + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            y: s.y + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
            phi: s.phi + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
        })
    }

    /// `λ`, `Vλ`, `𝕂` and `G_E Vλ = X(Vλ) - λ²` at a state, with all spatial
    /// derivatives taken symbolically.
    pub fn scalars(&self, s: State) -> Result<OrbitScalars, EvalError> {
        let (sn, cs) = s.phi.sin_cos();
        let mut v = [0.0; 12];
        self.scalar_tape.eval_into(s.x, s.y, &mut v)?;
        let p = ChartPoint { rho: v[0], rho_x: v[1], rho_y: v[2] };
        let k = -(-2.0 * p.rho).exp() * (v[3] + v[4]);
        if matches!(self.forcing, Forcing::Magnetic(_)) {
            let lambda = self.local(s.x, s.y)?.magnetic;
            return Ok(OrbitScalars { lambda, v_lambda: 0.0, kthermo: k, ge_v_lambda: 0.0 });
        }
        let e = FieldPoint { e1: v[5], e2: v[6], e1_x: v[7], e1_y: v[8], e2_x: v[9], e2_y: v[10] };
        let er = p.rho.exp();
        let lambda = er * (-e.e1 * sn + e.e2 * cs);
        let pe = e.e1 * cs + e.e2 * sn;
        let v_lambda = -er * pe;
        let div = e.e1_x + e.e2_y + 2.0 * (p.rho_x * e.e1 + p.rho_y * e.e2);
        // X = e^{-ρ}(cos φ ∂x + sin φ ∂y) + e^{-ρ}(-ρ_x sin φ + ρ_y cos φ) ∂φ, ∂φ(Vλ) = -λ
        let dx = p.rho_x * pe + e.e1_x * cs + e.e2_x * sn;
        let dy = p.rho_y * pe + e.e1_y * cs + e.e2_y * sn;
        let x_v_lambda = -(cs * dx + sn * dy) - (-p.rho).exp() * (-p.rho_x * sn + p.rho_y * cs) * lambda;
        Ok(OrbitScalars { lambda, v_lambda, kthermo: k - div, ge_v_lambda: x_v_lambda - lambda * lambda })
    }

    /// `R² - (x² + y²)`, positive inside a disk; `+∞` on a torus.
    pub fn boundary_function(&self, s: State) -> f64 {
        match self.chart.domain {
            Domain::Disk { radius } => radius * radius - s.x * s.x - s.y * s.y,
            Domain::Torus { .. } => f64::INFINITY,
        }
    }

    fn sample(&self, t: f64, state: State, record: Record) -> Result<OrbitSample, EvalError> {
        let scalars = if record == Record::Full { self.scalars(state)? } else { OrbitScalars::default() };
        Ok(OrbitSample { t, state, scalars })
    }

    /// Largest `s ∈ [0, h]` whose partial RK4 step stays inside the disk,
    /// with the boundary function at the returned point driven below
    /// `1e-12 R²`.
    fn locate_exit(&self, from: State, h: f64) -> Result<(f64, State), EvalError> {
        let radius = self.radius().expect("disk");
        let tol = 1e-12 * radius * radius;
        let g = |s: f64| -> Result<(f64, State), EvalError> {
            let st = if s == 0.0 { from } else { self.rk4_step(from, s)? };
            Ok((self.boundary_function(st), st))
        };
        let (mut lo, mut hi) = (0.0, h);
        let (mut g_lo, mut st_lo) = g(0.0)?;
        if g_lo <= tol {
            // Starting on the boundary: find an interior point before the exit.
            let mut s = h;
            let mut found = false;
            for _ in 0..60 {
                s *= 0.5;
                let (gs, st) = g(s)?;
                if gs > tol {
                    lo = s;
                    g_lo = gs;
                    st_lo = st;
                    found = true;
                    break;
                }
                hi = s;
            }
            if !found {
                return Ok((0.0, from));
            }
        }
        let mut best = (lo, st_lo, g_lo.abs());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let (gm, st) = g(mid)?;
            if gm.abs() < best.2 {
                best = (mid, st, gm.abs());
            }
            if gm.abs() <= tol || hi - lo <= 1e-16 * h.max(1.0) {
                break;
            }
            if gm > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok((best.0, best.1))
    }

    /// Integrates from `start` until `tmax` or a boundary exit.
    pub fn integrate(&self, start: State, tmax: f64, record: Record) -> Result<ThermostatOrbit, FlowError> {
        if !self.chart.domain.contains(start.x, start.y)
            && self.boundary_function(start) < -1e-12 * self.radius().unwrap_or(1.0).powi(2)
        {
            return Err(FlowError::OutsideDomain { x: start.x, y: start.y });
        }
        let mut samples = vec![self.sample(0.0, start, record)?];
        let mut t = 0.0;
        let mut s = start;
        let disk = self.radius().is_some();
        let mut steps: u64 = 0;
        let termination = loop {
            if tmax - t <= 1e-14 * tmax.max(1.0) {
                break Termination::Tmax;
            }
            let h = self.step.min(tmax - t);
            let next = match self.rk4_step(s, h) {
                Ok(n) if n.x.is_finite() && n.y.is_finite() && n.phi.is_finite() => n,
                _ => break Termination::StepFailure,
            };
            if disk && self.boundary_function(next) < 0.0 {
                let (dt, st) = match self.locate_exit(s, h) {
                    Ok(v) => v,
                    Err(_) => break Termination::StepFailure,
                };
                if dt > 0.0 {
                    t += dt;
                    s = st;
                    if record != Record::Endpoints {
                        samples.push(self.sample(t, s, record)?);
                    }
                }
                break Termination::BoundaryExit;
            }
            steps += 1;
            // Accumulate time from the step count to avoid drift.
            t = if h == self.step { steps as f64 * self.step } else { t + h };
            s = next;
            if record != Record::Endpoints {
                samples.push(self.sample(t, s, record)?);
            }
        };
        if record == Record::Endpoints && (samples.len() == 1 && t > 0.0) {
            samples.push(self.sample(t, s, record)?);
        }
        Ok(ThermostatOrbit { samples, termination })
    }

    pub fn integrate_orbit(&self, x0: f64, y0: f64, phi0: f64, tmax: f64) -> Result<ThermostatOrbit, FlowError> {
        self.integrate(State::new(x0, y0, phi0), tmax, Record::Full)
    }

    /// True when `φ` points strictly into the disk at a boundary point.
    pub fn points_inward(&self, s: State) -> bool {
        // inward normal is -(x, y)
        -(s.x * s.phi.cos() + s.y * s.phi.sin()) > 0.0
    }

    /// Exit time `τ(x, v)` on a disk chart.
    pub fn exit_time(&self, x: f64, y: f64, phi: f64) -> Result<f64, FlowError> {
        let radius = self.radius().ok_or(FlowError::NotDisk)?;
        let s = State::new(x, y, phi);
        if self.boundary_function(s).abs() <= 1e-12 * radius * radius && !self.points_inward(s) {
            return Ok(0.0);
        }
        let orbit = self.integrate(s, self.t_cap, Record::Endpoints)?;
        match orbit.termination {
            Termination::BoundaryExit => Ok(orbit.duration()),
            Termination::Tmax => Err(FlowError::NoExit { t_cap: self.t_cap }),
            Termination::StepFailure => Err(FlowError::StepFailure { t: orbit.duration() }),
        }
    }

    /// Orbit from a point until it exits the disk.
    pub fn exit_orbit(&self, s: State, record: Record) -> Result<ThermostatOrbit, FlowError> {
        self.radius().ok_or(FlowError::NotDisk)?;
        let orbit = self.integrate(s, self.t_cap, record)?;
        match orbit.termination {
            Termination::BoundaryExit => Ok(orbit),
            Termination::Tmax => Err(FlowError::NoExit { t_cap: self.t_cap }),
            Termination::StepFailure => Err(FlowError::StepFailure { t: orbit.duration() }),
        }
    }

    /// `exp^E_x(t v)` with `v = e^{-ρ}(cos φ, sin φ)`.
    pub fn thermostat_exp(&self, x: f64, y: f64, t: f64, phi: f64) -> Result<(f64, f64), FlowError> {
        if t < 0.0 {
            return Err(FlowError::Invalid("time must be non-negative".into()));
        }
        let orbit = self.integrate(State::new(x, y, phi), t, Record::Endpoints)?;
        match orbit.termination {
            Termination::Tmax => Ok((orbit.end().x, orbit.end().y)),
            Termination::BoundaryExit => Err(FlowError::LeftDomain { t: orbit.duration(), requested: t }),
            Termination::StepFailure => Err(FlowError::StepFailure { t: orbit.duration() }),
        }
    }

    /// Second-order route: `γ̈ + Γ(γ̇, γ̇) = λ iγ̇` in coordinates, RK4 on
    /// `(x, y, ẋ, ẏ)`. Returns base points at multiples of the step.
    pub fn integrate_second_order(&self, start: State, tmax: f64) -> Result<Vec<(f64, f64, f64)>, FlowError> {
        let rhs = |z: [f64; 4]| -> Result<[f64; 4], EvalError> {
            let l = self.local(z[0], z[1])?;
            let (u, v) = (z[2], z[3]);
            let ax = -l.rho_x * (u * u - v * v) - 2.0 * l.rho_y * u * v;
            let ay = l.rho_y * (u * u - v * v) - 2.0 * l.rho_x * u * v;
            // iγ̇ = (-v, u); λ = ⟨E, iγ̇⟩_g
            let lambda = match &self.forcing {
                Forcing::Thermostat => (2.0 * l.rho).exp() * (-l.e1 * v + l.e2 * u),
                Forcing::Magnetic(_) => l.magnetic,
            };
            Ok([u, v, ax - lambda * v, ay + lambda * u])
        };
        let rho = self.chart.rho.value.eval(start.x, start.y)?;
        let w = (-rho).exp();
        let mut z = [start.x, start.y, w * start.phi.cos(), w * start.phi.sin()];
        let mut out = vec![(0.0, z[0], z[1])];
        let n = (tmax / self.step).round() as usize;
        let h = tmax / n.max(1) as f64;
        let axpy =
            |z: [f64; 4], k: [f64; 4], a: f64| [z[0] + a * k[0], z[1] + a * k[1], z[2] + a * k[2], z[3] + a * k[3]];
        for i in 0..n {
            let k1 = rhs(z)?;
            let k2 = rhs(axpy(z, k1, 0.5 * h))?;
            let k3 = rhs(axpy(z, k2, 0.5 * h))?;
            let k4 = rhs(axpy(z, k3, h))?;
            for j in 0..4 {
                z[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            out.push(((i + 1) as f64 * h, z[0], z[1]));
        }
        Ok(out)
    }

    /// Right-hand side and its Jacobian in `(x, y, φ)`.
    fn rhs_jacobian(&self, s: State) -> Result<([f64; 3], [[f64; 3]; 3]), EvalError> {
        let mut v = [0.0; 12];
        self.scalar_tape.eval_into(s.x, s.y, &mut v)?;
        let [rho, rx, ry, rxx, ryy, e1, e2, e1x, e1y, e2x, e2y, rxy] = v;
        let (sn, cs) = s.phi.sin_cos();
        let w = (-rho).exp();
        let er = rho.exp();
        let (lam, lam_x, lam_y, lam_phi) = match &self.forcing {
            Forcing::Thermostat => {
                let m = -e1 * sn + e2 * cs;
                (
                    er * m,
                    rx * er * m + er * (-e1x * sn + e2x * cs),
                    ry * er * m + er * (-e1y * sn + e2y * cs),
                    er * (-e1 * cs - e2 * sn),
                )
            }
            Forcing::Magnetic(expr) => (
                self.local(s.x, s.y)?.magnetic,
                expr.differentiate(Var::X).eval(s.x, s.y)?,
                expr.differentiate(Var::Y).eval(s.x, s.y)?,
                0.0,
            ),
        };
        let g = -rx * sn + ry * cs;
        let f = [w * cs, w * sn, w * g + lam];
        let jac = [
            [-rx * w * cs, -ry * w * cs, -w * sn],
            [-rx * w * sn, -ry * w * sn, w * cs],
            [
                -rx * w * g + w * (-rxx * sn + rxy * cs) + lam_x,
                -ry * w * g + w * (-rxy * sn + ryy * cs) + lam_y,
                w * (-rx * cs - ry * sn) + lam_phi,
            ],
        ];
        Ok((f, jac))
    }

    /// Integrates the orbit together with the linearised flow applied to
    /// `tangent`, stopping at `tmax` or before the first step that leaves a
    /// disk. Returns `(t, state, tangent)` at every step.
    pub fn integrate_variational(
        &self,
        start: State,
        tangent: [f64; 3],
        tmax: f64,
    ) -> Result<Vec<(f64, State, [f64; 3])>, FlowError> {
        type Aug = [f64; 6];
        let rhs = |z: Aug| -> Result<Aug, EvalError> {
            let (f, j) = self.rhs_jacobian(State::new(z[0], z[1], z[2]))?;
            let d = [z[3], z[4], z[5]];
            let mut out = [f[0], f[1], f[2], 0.0, 0.0, 0.0];
            for r in 0..3 {
                out[3 + r] = j[r][0] * d[0] + j[r][1] * d[1] + j[r][2] * d[2];
            }
            Ok(out)
        };
        let axpy = |z: Aug, k: Aug, a: f64| {
            let mut o = z;
            for i in 0..6 {
                o[i] += a * k[i];
            }
            o
        };
        let h = self.step;
        let n = (tmax / h).floor() as usize;
        let mut z = [start.x, start.y, start.phi, tangent[0], tangent[1], tangent[2]];
        let mut out = vec![(0.0, start, tangent)];
        for i in 0..n {
            let k1 = rhs(z)?;
            let k2 = rhs(axpy(z, k1, 0.5 * h))?;
            let k3 = rhs(axpy(z, k2, 0.5 * h))?;
            let k4 = rhs(axpy(z, k3, h))?;
            let mut next = z;
            for j in 0..6 {
                next[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            let st = State::new(next[0], next[1], next[2]);
            if self.boundary_function(st) < 0.0 {
                break;
            }
            z = next;
            out.push(((i + 1) as f64 * h, st, [z[3], z[4], z[5]]));
        }
        Ok(out)
    }

    /// Step-doubling global error estimate: final-state distance between
    /// runs with steps `h` and `h/2` over `[0, tmax]` (interior orbits).
    pub fn doubling_error(&self, start: State, tmax: f64) -> Result<f64, FlowError> {
        let coarse = self.integrate(start, tmax, Record::Endpoints)?;
        let mut fine_flow = self.clone();
        fine_flow.step = self.step / 2.0;
        let fine = fine_flow.integrate(start, tmax, Record::Endpoints)?;
        if coarse.termination != Termination::Tmax || fine.termination != Termination::Tmax {
            return Err(FlowError::LeftDomain { t: coarse.duration().min(fine.duration()), requested: tmax });
        }
        let (a, b) = (coarse.end(), fine.end());
        Ok(((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.phi - b.phi).powi(2)).sqrt())
    }
}

/// `50 · 2R · max e^{ρ}` on a disk, `50 · L · max e^{ρ}` on a torus.
pub fn default_t_cap(chart: &IsothermalChart) -> Result<f64, FlowError> {
    let scale = chart.max_conformal_factor().map_err(|e| FlowError::Invalid(e.to_string()))?;
    let extent = match chart.domain {
        Domain::Disk { radius } => 2.0 * radius,
        Domain::Torus { length } => length * std::f64::consts::SQRT_2,
    };
    Ok(T_CAP_DIAMETERS * extent * scale)
}

/// Sampling of `∂₊SM` on a disk: boundary angle `ψ_i = 2πi/n_b` and entry
/// angle `θ_j ∈ (-π/2, π/2)` measured from the inward normal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Fan {
    pub n_boundary: usize,
    pub n_angles: usize,
}

impl Default for Fan {
    fn default() -> Self {
        Fan { n_boundary: 256, n_angles: 128 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FanEntry {
    pub boundary_index: usize,
    pub angle_index: usize,
    pub psi: f64,
    pub theta: f64,
    pub state: State,
}

impl Fan {
    pub fn new(n_boundary: usize, n_angles: usize) -> Self {
        Fan { n_boundary, n_angles }
    }

    pub fn len(&self) -> usize {
        self.n_boundary * self.n_angles
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn theta(&self, j: usize) -> f64 {
        -0.5 * PI + (j as f64 + 0.5) * PI / self.n_angles as f64
    }

    pub fn entry(&self, radius: f64, i: usize, j: usize) -> FanEntry {
        let psi = 2.0 * PI * i as f64 / self.n_boundary as f64;
        let theta = self.theta(j);
        FanEntry {
            boundary_index: i,
            angle_index: j,
            psi,
            theta,
            state: State::new(radius * psi.cos(), radius * psi.sin(), psi + PI + theta),
        }
    }

    pub fn entries(&self, radius: f64) -> Vec<FanEntry> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.n_boundary {
            for j in 0..self.n_angles {
                out.push(self.entry(radius, i, j));
            }
        }
        out
    }
}

/// Exit point and time for each fan entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FanExit {
    pub entry: FanEntry,
    /// `None` when the orbit did not exit before the cap.
    pub exit_time: Option<f64>,
    pub exit: State,
}

/// Integrates every fan orbit to its exit (in parallel, collected in order).
pub fn fan_exits(flow: &ThermostatFlow, fan: &Fan) -> Result<Vec<FanExit>, FlowError> {
    let radius = flow.radius().ok_or(FlowError::NotDisk)?;
    fan.entries(radius)
        .par_iter()
        .map(|e| {
            let orbit = flow.integrate(e.state, flow.t_cap, Record::Endpoints)?;
            let exit_time = match orbit.termination {
                Termination::BoundaryExit => Some(orbit.duration()),
                Termination::Tmax => None,
                Termination::StepFailure => return Err(FlowError::StepFailure { t: orbit.duration() }),
            };
            Ok(FanExit { entry: *e, exit_time, exit: orbit.end() })
        })
        .collect()
}

/// Sampled injectivity proxy for the exponential maps based at boundary
/// points: for every base point the exit position angle, measured from the
/// entry point, must be strictly monotone in the entry angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InjectivityProxy {
    pub monotone: bool,
    /// Smallest distance between exits of neighbouring entry angles.
    pub min_exit_separation: f64,
    pub worst_boundary_index: Option<usize>,
}

pub fn injectivity_proxy(exits: &[FanExit], fan: &Fan) -> InjectivityProxy {
    let mut monotone = true;
    let mut min_sep = f64::INFINITY;
    let mut worst = None;
    for i in 0..fan.n_boundary {
        let row = &exits[i * fan.n_angles..(i + 1) * fan.n_angles];
        let offsets: Vec<f64> =
            row.iter().map(|e| (e.exit.y.atan2(e.exit.x) - e.entry.psi).rem_euclid(2.0 * PI)).collect();
        let increasing = offsets.windows(2).all(|w| w[1] > w[0]);
        let decreasing = offsets.windows(2).all(|w| w[1] < w[0]);
        if !(increasing || decreasing) && fan.n_angles > 1 {
            monotone = false;
            worst.get_or_insert(i);
        }
        for w in row.windows(2) {
            let d = ((w[0].exit.x - w[1].exit.x).powi(2) + (w[0].exit.y - w[1].exit.y).powi(2)).sqrt();
            if d < min_sep {
                min_sep = d;
            }
        }
    }
    InjectivityProxy { monotone, min_exit_separation: min_sep, worst_boundary_index: worst }
}

/// Margin below which the boundary does not count as strictly convex.
pub const CONVEXITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct SimplicityReport {
    pub convexity: ConvexityReport,
    pub strictly_convex: bool,
    pub fan: Fan,
    pub exited: usize,
    pub not_exited: usize,
    pub max_exit_time: f64,
    pub conjugate_orbits: usize,
    pub conjugate_free: bool,
    pub injectivity: InjectivityProxy,
    pub simple: bool,
    pub verdict: String,
}

/// Strict convexity, exits before the time cap, absence of conjugate
/// points and the injectivity proxy, all sampled on `fan`.
pub fn simplicity_check(
    chart: &IsothermalChart,
    field: &ExternalField,
    fan: &Fan,
) -> Result<SimplicityReport, JacobiError> {
    let convexity = boundary_convexity(chart, field, CONVEXITY_SAMPLES)?;
    let strictly_convex = convexity.margin > CONVEXITY_TOL;
    let flow = ThermostatFlow::new(chart, field)?;
    let scan = conjugate_scan(&flow, 1.0, fan)?;
    let exits = scan.exits();
    let exited = exits.iter().filter(|e| e.exit_time.is_some()).count();
    let max_exit_time = exits.iter().filter_map(|e| e.exit_time).fold(0.0, f64::max);
    let conjugate_orbits = scan.conjugate_count();
    let injectivity = injectivity_proxy(&exits, fan);
    let mut failures = Vec::new();
    if !strictly_convex {
        failures.push(format!("boundary not strictly convex (margin {:e})", convexity.margin));
    }
    if exited < exits.len() {
        failures.push(format!("{} orbits did not exit", exits.len() - exited));
    }
    if conjugate_orbits > 0 {
        failures.push(format!("{conjugate_orbits} orbits with conjugate points"));
    }
    if !injectivity.monotone {
        failures.push("exit positions not monotone in the entry angle".into());
    }
    let simple = failures.is_empty();
    let verdict =
        if simple { "certified up to sampling".to_string() } else { format!("not simple: {}", failures.join("; ")) };
    Ok(SimplicityReport {
        convexity,
        strictly_convex,
        fan: *fan,
        exited,
        not_exited: exits.len() - exited,
        max_exit_time,
        conjugate_orbits,
        conjugate_free: conjugate_orbits == 0,
        injectivity,
        simple,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprfield::parse;

    fn flat(radius: f64) -> IsothermalChart {
        IsothermalChart::new(Domain::Disk { radius }, parse("0").unwrap(), 17, 17).unwrap()
    }

    fn field(e1: &str, e2: &str) -> ExternalField {
        ExternalField::new(parse(e1).unwrap(), parse(e2).unwrap())
    }

    #[test]
    fn straight_lines() {
        let flow = ThermostatFlow::new(&flat(10.0), &ExternalField::zero()).unwrap();
        let orbit = flow.integrate_orbit(0.1, -0.2, 0.7, 2.0).unwrap();
        assert_eq!(orbit.termination, Termination::Tmax);
        for s in &orbit.samples {
            assert!((s.state.x - (0.1 + s.t * 0.7f64.cos())).abs() < 1e-10);
            assert!((s.state.y - (-0.2 + s.t * 0.7f64.sin())).abs() < 1e-10);
        }
    }

    #[test]
    fn exit_times() {
        let flow = ThermostatFlow::new(&flat(1.0), &ExternalField::zero()).unwrap();
        for phi in [0.0, 1.0, 2.5, 4.0] {
            assert!((flow.exit_time(0.0, 0.0, phi).unwrap() - 1.0).abs() < 1e-10);
        }
        // boundary point (1, 0), direction at angle θ from the inward normal
        let theta: f64 = 0.4;
        let tau = flow.exit_time(1.0, 0.0, PI + theta).unwrap();
        assert!((tau - 2.0 * theta.cos()).abs() < 1e-10);
        assert_eq!(flow.exit_time(1.0, 0.0, 0.3).unwrap(), 0.0);
        assert_eq!(flow.exit_time(1.0, 0.0, 0.5 * PI).unwrap(), 0.0);
    }

    #[test]
    fn exit_lands_on_boundary() {
        let flow = ThermostatFlow::new(&flat(1.0), &field("0.3", "0.1*x")).unwrap();
        let orbit = flow.integrate_orbit(0.2, 0.1, 1.0, 100.0).unwrap();
        assert_eq!(orbit.termination, Termination::BoundaryExit);
        let e = orbit.end();
        assert!((e.x * e.x + e.y * e.y - 1.0).abs() <= 1e-10);
        assert!(orbit.samples.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn exponential_map() {
        let flow = ThermostatFlow::new(&flat(10.0), &ExternalField::zero()).unwrap();
        assert_eq!(flow.thermostat_exp(0.3, 0.4, 0.0, 1.0).unwrap(), (0.3, 0.4));
        let (x, y) = flow.thermostat_exp(0.3, 0.4, 1.5, 1.0).unwrap();
        assert!((x - 0.3 - 1.5 * 1f64.cos()).abs() < 1e-10 && (y - 0.4 - 1.5 * 1f64.sin()).abs() < 1e-10);
        let small = ThermostatFlow::new(&flat(1.0), &ExternalField::zero()).unwrap();
        assert!(matches!(small.thermostat_exp(0.0, 0.0, 2.0, 0.0), Err(FlowError::LeftDomain { .. })));
    }

    #[test]
    fn scalar_identities() {
        let flow = ThermostatFlow::new(&flat(2.0), &field("0.3+x*y", "sin(x)")).unwrap();
        let s = State::new(0.3, -0.4, 1.2);
        let sc = flow.scalars(s).unwrap();
        // Vλ is -⟨E, v⟩ and λ is ⟨E, iv⟩ for ρ = 0
        let (e1, e2) = (0.3 + 0.3 * -0.4, 0.3f64.sin());
        assert!((sc.v_lambda + e1 * 1.2f64.cos() + e2 * 1.2f64.sin()).abs() < 1e-14);
        assert!((sc.lambda - (-e1 * 1.2f64.sin() + e2 * 1.2f64.cos())).abs() < 1e-14);
    }

    #[test]
    fn fan_geometry() {
        let fan = Fan::new(4, 3);
        let e = fan.entry(1.0, 1, 1);
        assert!((e.theta).abs() < 1e-15);
        assert!((e.state.x).abs() < 1e-15 && (e.state.y - 1.0).abs() < 1e-15);
        assert!((e.state.phi - (0.5 * PI + PI)).abs() < 1e-15);
        let flow = ThermostatFlow::new(&flat(1.0), &ExternalField::zero()).unwrap();
        let exits = fan_exits(&flow, &fan).unwrap();
        for x in &exits {
            assert!((x.exit_time.unwrap() - 2.0 * x.entry.theta.cos()).abs() < 1e-10);
        }
        assert!(injectivity_proxy(&exits, &fan).monotone);
    }

    #[test]
    fn csv_header() {
        let flow = ThermostatFlow::new(&flat(1.0), &ExternalField::zero()).unwrap();
        let orbit = flow.integrate_orbit(0.0, 0.0, 0.0, 0.002).unwrap();
        let mut buf = Vec::new();
        orbit.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x,y,phi,lambda,Vlambda,Kthermo\n0,0,0,0,0,0,0\n"), "{text}");
        assert_eq!(text.lines().count(), 4);
    }
}
