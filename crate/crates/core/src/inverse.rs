//! Discrete `P = VG_E`, `P* = (G_E + Vλ)V`, the projections `T_m` and
//! `Q_m = T_m V G_E`, least-squares recipes for invariant functions and
//! 1-forms, and regularized tensor recovery from ray data.

use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::DVector;
use num_complex::Complex64 as C;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::exprfield::{EvalError, FieldExpr};
use crate::grid::Grid2;
use crate::phase::{PhaseError, PhaseFunction, ThermostatFrame};
use crate::random::PhaseSpec;
use crate::xray::{RayData, SymmetricTensor, TensorBasis, TensorProblem, XrayError};

#[derive(Debug, Error)]
pub enum InverseError {
    #[error(transparent)]
    Phase(#[from] PhaseError),
    #[error(transparent)]
    Xray(#[from] XrayError),
    #[error("expression evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

const ZERO: C = C::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OperatorKind {
    P,
    PAdjoint,
    T,
    Q,
    QAdjoint,
}

impl OperatorKind {
    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::P => "P",
            OperatorKind::PAdjoint => "P*",
            OperatorKind::T => "T_m",
            OperatorKind::Q => "Q_m",
            OperatorKind::QAdjoint => "Q_m*",
        }
    }

    pub fn adjoint(self) -> OperatorKind {
        match self {
            OperatorKind::P => OperatorKind::PAdjoint,
            OperatorKind::PAdjoint => OperatorKind::P,
            OperatorKind::T => OperatorKind::T,
            OperatorKind::Q => OperatorKind::QAdjoint,
            OperatorKind::QAdjoint => OperatorKind::Q,
        }
    }
}

/// Matrix-free operators on phase functions, adjoint in `dΣ³`.
#[derive(Debug, Clone)]
pub struct Operators<'a> {
    pub frame: &'a ThermostatFrame,
    pub m: usize,
    v_lambda: PhaseFunction,
}

pub fn build_operators(frame: &ThermostatFrame, m: usize) -> Operators<'_> {
    Operators { frame, m, v_lambda: frame.v_lambda() }
}

impl<'a> Operators<'a> {
    /// `(G_E + Vλ) u`.
    pub fn transport_adjoint(&self, u: &PhaseFunction) -> Result<PhaseFunction, PhaseError> {
        self.frame.g_e(u)?.add(&self.v_lambda.mul(u)?)
    }

    pub fn p(&self, u: &PhaseFunction) -> Result<PhaseFunction, PhaseError> {
        Ok(self.frame.g_e(u)?.vertical())
    }

    pub fn p_adjoint(&self, h: &PhaseFunction) -> Result<PhaseFunction, PhaseError> {
        self.transport_adjoint(&h.vertical())
    }

    pub fn t(&self, u: &PhaseFunction) -> PhaseFunction {
        u.tail(self.m)
    }

    pub fn q(&self, u: &PhaseFunction) -> Result<PhaseFunction, PhaseError> {
        Ok(self.p(u)?.tail(self.m))
    }

    pub fn q_adjoint(&self, h: &PhaseFunction) -> Result<PhaseFunction, PhaseError> {
        self.p_adjoint(&h.tail(self.m))
    }

    pub fn apply(&self, kind: OperatorKind, u: &PhaseFunction) -> Result<PhaseFunction, PhaseError> {
        match kind {
            OperatorKind::P => self.p(u),
            OperatorKind::PAdjoint => self.p_adjoint(u),
            OperatorKind::T => Ok(self.t(u)),
            OperatorKind::Q => self.q(u),
            OperatorKind::QAdjoint => self.q_adjoint(u),
        }
    }

    /// `|⟨Au, v⟩ - ⟨u, A*v⟩| / (‖u‖‖v‖)`.
    pub fn adjoint_residual(
        &self,
        kind: OperatorKind,
        u: &PhaseFunction,
        v: &PhaseFunction,
    ) -> Result<f64, PhaseError> {
        let lhs = self.frame.inner_product(&self.apply(kind, u)?, v)?;
        let rhs = self.frame.inner_product(u, &self.apply(kind.adjoint(), v)?)?;
        let scale = (self.frame.norm_sq(u)? * self.frame.norm_sq(v)?).sqrt();
        Ok(if scale > 0.0 { (lhs - rhs).norm() / scale } else { (lhs - rhs).norm() })
    }
}

/// `⟨u, 1⟩ / ⟨1, 1⟩`.
fn mean(frame: &ThermostatFrame, u: &PhaseFunction) -> Result<C, PhaseError> {
    let one = PhaseFunction::constant(frame.grid.clone(), C::new(1.0, 0.0));
    Ok(frame.inner_product(u, &one)? / frame.norm_sq(&one)?)
}

fn require_closed(frame: &ThermostatFrame) -> Result<(), InverseError> {
    if !frame.chart.domain.is_closed() {
        return Err(InverseError::Hypothesis("operation requires a torus chart".into()));
    }
    Ok(())
}

/// `‖u‖_{H¹} / ‖Pu‖` for `u` orthogonal to constants; `None` when `Pu = 0`.
pub fn p_control_ratio(ops: &Operators, u: &PhaseFunction) -> Result<Option<f64>, InverseError> {
    let norm = ops.frame.norm_sq(u)?.sqrt();
    let mu = mean(ops.frame, u)?;
    let one_norm = ops.frame.norm_sq(&PhaseFunction::constant(ops.frame.grid.clone(), C::new(1.0, 0.0)))?.sqrt();
    if mu.norm() * one_norm > 1e-10 * norm.max(f64::MIN_POSITIVE) {
        return Err(InverseError::Hypothesis("u must be orthogonal to constants".into()));
    }
    let pu = ops.frame.norm_sq(&ops.p(u)?)?.sqrt();
    let h1 = ops.frame.h1_norm(u)?;
    Ok(if pu > 1e-14 * h1 { Some(h1 / pu) } else { None })
}

/// `‖u‖_{H¹} / ‖Q_m u‖` for `u` supported in `|k| ≥ m`.
pub fn q_control_ratio(ops: &Operators, u: &PhaseFunction) -> Result<Option<f64>, InverseError> {
    if u.support(0.0).iter().any(|k| (k.unsigned_abs() as usize) < ops.m) {
        return Err(InverseError::Hypothesis(format!("u must be supported in |k| ≥ {}", ops.m)));
    }
    let qu = ops.frame.norm_sq(&ops.q(u)?)?.sqrt();
    let h1 = ops.frame.h1_norm(u)?;
    Ok(if qu > 1e-14 * h1 { Some(h1 / qu) } else { None })
}

/// Empirical lower bounds for the constants in `‖u‖_{H¹} ≤ C‖Pu‖` and
/// `‖u‖_{H¹} ≤ C‖Q_m u‖`.
#[derive(Debug, Clone, Serialize)]
pub struct ControlConstants {
    pub label: &'static str,
    pub m: usize,
    pub samples: usize,
    pub c_p: f64,
    pub c_q: f64,
    /// Samples with `Pu = 0` or `Q_m u = 0`.
    pub counterexample_candidates: usize,
}

pub const EMPIRICAL_LABEL: &str = "empirical lower bound";

pub fn estimate_control_constants(
    frame: &ThermostatFrame,
    m: usize,
    samples: usize,
    spatial_degree: u32,
    rng: &mut impl Rng,
) -> Result<ControlConstants, InverseError> {
    require_closed(frame)?;
    let ops = build_operators(frame, m);
    let domain = frame.chart.domain;
    let mi = m as i32;
    let (mut c_p, mut c_q, mut bad) = (0.0f64, 0.0f64, 0);
    for _ in 0..samples {
        let u = PhaseSpec::random(rng, domain, &[-2, -1, 0, 1, 2], spatial_degree, 1.0).sample(&frame.grid);
        let mu = mean(frame, &u)?;
        let u = u.sub(&PhaseFunction::constant(frame.grid.clone(), mu))?;
        match p_control_ratio(&ops, &u)? {
            Some(r) => c_p = c_p.max(r),
            None => bad += 1,
        }
        let v = PhaseSpec::random(rng, domain, &[-mi - 1, -mi, mi, mi + 1], spatial_degree, 1.0).sample(&frame.grid);
        match q_control_ratio(&ops, &v)? {
            Some(r) => c_q = c_q.max(r),
            None => bad += 1,
        }
    }
    Ok(ControlConstants { label: EMPIRICAL_LABEL, m, samples, c_p, c_q, counterexample_candidates: bad })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CgOptions {
    /// Fiber truncation of the unknown.
    pub kmax: usize,
    pub tol: f64,
    /// `None` means `10 ×` the number of unknowns.
    pub max_iter: Option<usize>,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions { kmax: 8, tol: 1e-8, max_iter: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverReport {
    pub operator: &'static str,
    pub rhs_norm: f64,
    /// `‖Ah - b‖`.
    pub residual: f64,
    /// `‖A*(Ah - b)‖ / ‖A*b‖`.
    pub normal_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Conjugate gradients on the normal equations `A*A h = A*b` (CGLS), with
/// the unknown truncated to `|k| ≤ kmax` and inner products in `dΣ³`.
fn cgls(
    frame: &ThermostatFrame,
    name: &'static str,
    a: impl Fn(&PhaseFunction) -> Result<PhaseFunction, PhaseError>,
    a_adj: impl Fn(&PhaseFunction) -> Result<PhaseFunction, PhaseError>,
    b: &PhaseFunction,
    opts: &CgOptions,
) -> Result<(PhaseFunction, SolverReport), InverseError> {
    let kmax = opts.kmax;
    let unknowns = frame.grid.len() * (2 * kmax + 1);
    let max_iter = opts.max_iter.unwrap_or(10 * unknowns);
    let nsq = |u: &PhaseFunction| frame.norm_sq(u);
    let mut x = PhaseFunction::zero(frame.grid.clone(), kmax);
    let mut r = b.clone();
    let mut s = a_adj(&r)?.with_kmax(kmax);
    let mut p = s.clone();
    let s0 = nsq(&s)?.sqrt();
    let mut gamma = s0 * s0;
    let mut iterations = 0;
    let mut converged = s0 == 0.0;
    while !converged && iterations < max_iter {
        let q = a(&p)?;
        let qq = nsq(&q)?;
        if qq == 0.0 {
            break;
        }
        let alpha = gamma / qq;
        x = x.add(&p.scale(C::new(alpha, 0.0)))?;
        r = r.sub(&q.scale(C::new(alpha, 0.0)))?;
        s = a_adj(&r)?.with_kmax(kmax);
        let gamma_new = nsq(&s)?;
        iterations += 1;
        if gamma_new.sqrt() <= opts.tol * s0 {
            converged = true;
            break;
        }
        p = s.add(&p.scale(C::new(gamma_new / gamma, 0.0)))?;
        gamma = gamma_new;
    }
    let residual = nsq(&a(&x)?.sub(b)?)?.sqrt();
    let normal = nsq(&a_adj(&a(&x)?.sub(b)?)?.with_kmax(kmax))?.sqrt();
    let report = SolverReport {
        operator: name,
        rhs_norm: nsq(b)?.sqrt(),
        residual,
        normal_residual: if s0 > 0.0 { normal / s0 } else { 0.0 },
        iterations,
        converged,
    };
    Ok((x, report))
}

/// Output of [`construct_invariant_function`].
#[derive(Debug, Clone, Serialize)]
pub struct InvariantFunction {
    #[serde(skip)]
    pub w: PhaseFunction,
    #[serde(skip)]
    pub h: PhaseFunction,
    pub solver: SolverReport,
    /// `‖(G_E + Vλ)w - a‖`.
    pub invariance_residual: f64,
    /// `w₀` equals `f` bit for bit.
    pub w0_exact: bool,
}

/// Least-squares version of the recipe `w = Vh + f` with
/// `P*h = a - (G_E + Vλ)f`.
pub fn construct_invariant_function(
    frame: &ThermostatFrame,
    f: &[f64],
    a: &PhaseFunction,
    opts: &CgOptions,
) -> Result<InvariantFunction, InverseError> {
    require_closed(frame)?;
    if f.len() != frame.grid.len() {
        return Err(InverseError::Invalid("f is not sampled on the frame grid".into()));
    }
    let one = PhaseFunction::constant(frame.grid.clone(), C::new(1.0, 0.0));
    let pairing = frame.inner_product(a, &one)?.norm();
    let scale = (frame.norm_sq(a)? * frame.norm_sq(&one)?).sqrt();
    if pairing > 1e-10 * scale.max(f64::MIN_POSITIVE) && pairing > 1e-14 {
        return Err(InverseError::Hypothesis(format!("⟨a, 1⟩ = {pairing:.3e} must vanish")));
    }
    let ops = build_operators(frame, 0);
    let f_phase = PhaseFunction::from_base(frame.grid.clone(), f);
    let rhs = a.sub(&ops.transport_adjoint(&f_phase)?)?;
    let (h, solver) = cgls(frame, "P*", |u| ops.p_adjoint(u), |r| ops.p(r), &rhs, opts)?;
    let w = h.vertical().add(&f_phase)?;
    let invariance_residual = frame.norm_sq(&ops.transport_adjoint(&w)?.sub(a)?)?.sqrt();
    let w0 = w.mode(0).expect("mode 0");
    let w0_exact = w0.iter().zip(f).all(|(c, &v)| c.re.to_bits() == v.to_bits() && c.im == 0.0);
    Ok(InvariantFunction { w, h, solver, invariance_residual, w0_exact })
}

/// Real 1-form `a₁ dx + a₂ dy` sampled on a grid.
#[derive(Debug, Clone)]
pub struct OneForm {
    pub grid: Arc<Grid2>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
}

impl OneForm {
    pub fn from_exprs(grid: &Arc<Grid2>, a1: &FieldExpr, a2: &FieldExpr) -> Result<Self, EvalError> {
        let mut p = Vec::with_capacity(grid.len());
        let mut q = Vec::with_capacity(grid.len());
        for (_, x, y) in grid.points() {
            p.push(a1.eval(x, y)?);
            q.push(a2.eval(x, y)?);
        }
        Ok(OneForm { grid: grid.clone(), a1: p, a2: q })
    }

    pub fn zero(grid: &Arc<Grid2>) -> Self {
        OneForm { grid: grid.clone(), a1: vec![0.0; grid.len()], a2: vec![0.0; grid.len()] }
    }

    /// `dψ`.
    pub fn exact(grid: &Arc<Grid2>, psi: &[f64]) -> Self {
        let data: Vec<C> = psi.iter().map(|&v| C::new(v, 0.0)).collect();
        let (dx, dy) = grid.gradient(&data);
        OneForm { grid: grid.clone(), a1: dx.iter().map(|c| c.re).collect(), a2: dy.iter().map(|c| c.re).collect() }
    }

    /// Lift `α(v)` with `v = e^{-ρ}(cos φ, sin φ)`: modes `±1`.
    pub fn lift(&self, frame: &ThermostatFrame) -> PhaseFunction {
        let n = self.grid.len();
        let mut plus = vec![ZERO; n];
        let mut minus = vec![ZERO; n];
        for idx in 0..n {
            let w = 0.5 * frame.exp_neg_rho[idx];
            plus[idx] = C::new(w * self.a1[idx], -w * self.a2[idx]);
            minus[idx] = plus[idx].conj();
        }
        PhaseFunction::from_modes(self.grid.clone(), 1, vec![minus, vec![ZERO; n], plus]).expect("three modes")
    }

    pub fn sup_norm(&self) -> f64 {
        self.a1.iter().chain(&self.a2).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sub(&self, other: &OneForm) -> OneForm {
        OneForm {
            grid: self.grid.clone(),
            a1: self.a1.iter().zip(&other.a1).map(|(a, b)| a - b).collect(),
            a2: self.a2.iter().zip(&other.a2).map(|(a, b)| a - b).collect(),
        }
    }
}

/// `sup|η₊α₋₁ + η₋α₁|` relative to the larger of the two terms (0 when
/// both vanish).
pub fn solenoidality_residual(frame: &ThermostatFrame, alpha: &OneForm) -> Result<f64, InverseError> {
    let lift = alpha.lift(frame);
    let a = frame.eta_plus(&lift.project(-1))?;
    let b = frame.eta_minus(&lift.project(1))?;
    let scale = a.sup_norm().max(b.sup_norm());
    let diff = a.add(&b)?.sup_norm();
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

/// Solenoidality tolerance for 1-form inputs.
pub const SOLENOIDAL_TOL: f64 = 1e-8;

/// `α - dψ` with `Δψ = ∂ₓa₁ + ∂ᵧa₂` solved spectrally, so that the result is
/// divergence free (the codifferential in isothermal coordinates is
/// `-e^{-2ρ}(∂ₓa₁ + ∂ᵧa₂)`).
pub fn solenoidal_project(frame: &ThermostatFrame, alpha: &OneForm) -> Result<OneForm, InverseError> {
    require_closed(frame)?;
    let grid = &alpha.grid;
    let to_c = |v: &[f64]| v.iter().map(|&x| C::new(x, 0.0)).collect::<Vec<_>>();
    let (d1, _) = grid.gradient(&to_c(&alpha.a1));
    let (_, d2) = grid.gradient(&to_c(&alpha.a2));
    let div: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| a.re + b.re).collect();
    let psi = grid.solve_poisson(&div);
    Ok(alpha.sub(&OneForm::exact(grid, &psi)))
}

/// Output of [`construct_invariant_oneform`].
#[derive(Debug, Clone, Serialize)]
pub struct InvariantOneForm {
    #[serde(skip)]
    pub w: PhaseFunction,
    #[serde(skip)]
    pub h: PhaseFunction,
    pub solver: SolverReport,
    pub solenoidal_residual: f64,
    /// `sup |a₀|` for `a = -(G_E + Vλ)α`.
    pub a0: f64,
    pub invariance_residual: f64,
    /// `w₋₁ = α₋₁` and `w₁ = α₁` bit for bit.
    pub modes_exact: bool,
}

/// Least-squares version of the recipe `w = VT₁h + α` with
/// `Q₁*h = -(G_E + Vλ)α`.
pub fn construct_invariant_oneform(
    frame: &ThermostatFrame,
    alpha: &OneForm,
    opts: &CgOptions,
) -> Result<InvariantOneForm, InverseError> {
    require_closed(frame)?;
    let solenoidal_residual = solenoidality_residual(frame, alpha)?;
    if solenoidal_residual > SOLENOIDAL_TOL {
        return Err(InverseError::Hypothesis(format!("α is not solenoidal: residual {solenoidal_residual:.3e}")));
    }
    let ops = build_operators(frame, 1);
    let lift = alpha.lift(frame);
    let rhs = ops.transport_adjoint(&lift)?.scale(C::new(-1.0, 0.0));
    let a0 = rhs.mode_sup(0);
    let (h, solver) = cgls(frame, "Q_1*", |u| ops.q_adjoint(u), |r| ops.q(r), &rhs, opts)?;
    let w = ops.t(&h).vertical().add(&lift)?;
    let invariance_residual = frame.norm_sq(&ops.transport_adjoint(&w)?)?.sqrt();
    let same = |k: i32| {
        w.mode(k)
            .unwrap()
            .iter()
            .zip(lift.mode(k).unwrap())
            .all(|(a, b)| a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits())
    };
    let modes_exact = same(-1) && same(1);
    Ok(InvariantOneForm { w, h, solver, solenoidal_residual, a0, invariance_residual, modes_exact })
}

/// Both sides of the lower bound for `‖Q_m u‖²` at a given `α`.
#[derive(Debug, Clone, Serialize)]
pub struct QBound {
    pub m: usize,
    pub alpha: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `‖Q_m u‖² ≥ (1-(m-1)²+αm²)(‖μ₋u_m‖² + ‖μ₊u_{-m}‖²)
/// + (1-m²+α(m+1)²)(‖μ₋u_{m+1}‖² + ‖μ₊u_{-m-1}‖²) + ‖T_m G_E u‖² + α‖T_m G_E Vu‖²`
/// for `u` supported in `|k| ≥ m`.
pub fn q_lower_bound(frame: &ThermostatFrame, u: &PhaseFunction, m: usize, alpha: f64) -> Result<QBound, InverseError> {
    if m == 0 || u.support(0.0).iter().any(|k| (k.unsigned_abs() as usize) < m) {
        return Err(InverseError::Hypothesis(format!("u must be supported in |k| ≥ m with m ≥ 1, m = {m}")));
    }
    let ops = build_operators(frame, m);
    let nsq = |v: &PhaseFunction| frame.norm_sq(v);
    let mi = m as i32;
    let mf = m as f64;
    let low = nsq(&frame.mu_minus(&u.project(mi))?)? + nsq(&frame.mu_plus(&u.project(-mi))?)?;
    let next = nsq(&frame.mu_minus(&u.project(mi + 1))?)? + nsq(&frame.mu_plus(&u.project(-mi - 1))?)?;
    let tge = nsq(&frame.g_e(u)?.tail(m))?;
    let tgev = nsq(&frame.g_e(&u.vertical())?.tail(m))?;
    let lhs = nsq(&ops.q(u)?)?;
    let rhs = (1.0 - (mf - 1.0).powi(2) + alpha * mf * mf) * low
        + (1.0 - mf * mf + alpha * (mf + 1.0).powi(2)) * next
        + tge
        + alpha * tgev;
    let tolerance = 1e-6;
    let pass = lhs >= rhs - tolerance * (lhs.abs() + rhs.abs());
    Ok(QBound { m, alpha, lhs, rhs, tolerance, pass })
}

/// Result of a regularized recovery over a tensor basis.
#[derive(Debug, Clone, Serialize)]
pub struct Recovery {
    pub m: usize,
    pub basis_dim: usize,
    pub reg: f64,
    pub sigma_max: f64,
    pub coefficients: Vec<f64>,
    pub data_norm: f64,
    /// `‖A c - d‖ / ‖d‖`.
    pub data_residual: f64,
    pub estimate_norm: f64,
    pub solenoidal_norm: f64,
    pub potential_norm: f64,
    pub truth_norm: Option<f64>,
    /// Relative `L²` error of the part orthogonal to potentials.
    pub solenoidal_error: Option<f64>,
    pub relative_error: Option<f64>,
}

/// Default Tikhonov weight relative to `σ_max²`.
pub const DEFAULT_REG: f64 = 1e-6;

/// Tikhonov-regularized least squares `min ‖A c - d‖² + reg ‖c‖²` in
/// `L²`-orthonormal coordinates of the basis span; `reg` defaults to
/// `1e-6 σ_max²`.
pub fn recover_tensor(
    problem: &TensorProblem,
    data: &RayData,
    reg: Option<f64>,
    truth: Option<&SymmetricTensor>,
) -> Result<(Recovery, SymmetricTensor), InverseError> {
    if data.fan != problem.options.fan || data.len() != problem.orbits {
        return Err(InverseError::Invalid("ray data and problem use different fans".into()));
    }
    for (v, e) in data.values.iter().zip(&problem.entries) {
        if v.boundary_index != e.boundary_index || v.angle_index != e.angle_index {
            return Err(InverseError::Invalid("ray data is not in fan order".into()));
        }
    }
    let d = DVector::from_vec(data.data());
    let svd = problem.matrix.clone().svd(true, true);
    let (u, vt) = (svd.u.as_ref().expect("U"), svd.v_t.as_ref().expect("Vᵀ"));
    let sigma_max = svd.singular_values.iter().fold(0.0f64, |m, &s| m.max(s));
    let reg = reg.unwrap_or(DEFAULT_REG * sigma_max * sigma_max);
    if !(reg >= 0.0) {
        return Err(InverseError::Invalid(format!("regularization must be non-negative, got {reg}")));
    }
    let n = problem.matrix.ncols();
    let mut y = DVector::zeros(n);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        let denom = s * s + reg;
        if denom > 0.0 {
            let c = s * u.column(i).dot(&d) / denom;
            y += vt.row(i).transpose() * c;
        }
    }
    let fit = &problem.matrix * &y - &d;
    let dn = d.norm();
    let (sol, pot) = problem.split(&y);
    let coefficients = problem.coefficients(&y);
    let estimate = problem.options.basis.tensor(coefficients.as_slice());
    let (truth_norm, solenoidal_error, relative_error) = match truth {
        Some(t) => {
            let (yt, rest) = problem.coordinates(t)?;
            let (sol_t, _) = problem.split(&yt);
            let tn = (yt.norm_squared() + rest * rest).sqrt();
            let se = ((&sol - &sol_t).norm_squared() + rest * rest).sqrt()
                / (sol_t.norm_squared() + rest * rest).sqrt().max(f64::MIN_POSITIVE);
            let re = ((&y - &yt).norm_squared() + rest * rest).sqrt() / tn.max(f64::MIN_POSITIVE);
            (Some(tn), Some(se), Some(re))
        }
        None => (None, None, None),
    };
    let recovery = Recovery {
        m: problem.options.basis.order,
        basis_dim: n,
        reg,
        sigma_max,
        coefficients: coefficients.iter().copied().collect(),
        data_norm: dn,
        data_residual: if dn > 0.0 { fit.norm() / dn } else { fit.norm() },
        estimate_norm: y.norm(),
        solenoidal_norm: sol.norm(),
        potential_norm: pot.norm(),
        truth_norm,
        solenoidal_error,
        relative_error,
    };
    Ok((recovery, estimate))
}

/// CSV `component,p,q,coefficient`.
pub fn write_coefficients_csv<W: Write>(basis: &TensorBasis, coefficients: &[f64], mut out: W) -> io::Result<()> {
    writeln!(out, "component,p,q,coefficient")?;
    for (&(j, p, q), c) in basis.elements().iter().zip(coefficients) {
        writeln!(out, "{j},{p},{q},{}", c + 0.0)?;
    }
    Ok(())
}
