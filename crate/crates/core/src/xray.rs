//! Ray transforms of symmetric tensors along thermostat orbits, potential
//! tensors, transport solutions and numerical kernel tests.

use std::f64::consts::PI;
use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::exprfield::{EvalError, Expr, FieldExpr, Tape, Var};
use crate::flow::{Fan, FanEntry, FlowError, Record, State, ThermostatFlow};
use crate::grid::{Domain, Grid2};
use crate::phase::{PhaseError, PhaseFunction, ThermostatFrame};
use crate::surface::{ExternalField, IsothermalChart};

#[derive(Debug, Error)]
pub enum XrayError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("expression evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Phase(#[from] PhaseError),
    #[error("fan orbit (boundary {boundary_index}, angle {angle_index}) does not exit: {source}")]
    NoExit { boundary_index: usize, angle_index: usize, source: FlowError },
    #[error("Fourier support violation: {0}")]
    Support(String),
    #[error("ill-conditioned basis: Gram condition number {condition:.3e} exceeds {cap:.3e}")]
    IllConditioned { condition: f64, cap: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Symmetric `m`-tensor on a chart, stored by its `m + 1` independent
/// components: `c_j` is the component with `j` indices equal to `y`.
#[derive(Debug, Clone)]
pub struct SymmetricTensor {
    components: Vec<FieldExpr>,
}

impl SymmetricTensor {
    pub fn new(components: Vec<FieldExpr>) -> Result<Self, XrayError> {
        if components.is_empty() {
            return Err(XrayError::Invalid("a tensor needs at least one component".into()));
        }
        Ok(SymmetricTensor { components })
    }

    pub fn function(f: FieldExpr) -> Self {
        SymmetricTensor { components: vec![f] }
    }

    pub fn zero(order: usize) -> Self {
        SymmetricTensor { components: vec![Expr::zero(); order + 1] }
    }

    /// The metric `e^{2ρ}(dx² + dy²)`.
    pub fn metric(chart: &IsothermalChart) -> Self {
        let g = chart.rho.value.scale(2.0).exp();
        SymmetricTensor { components: vec![g.clone(), Expr::zero(), g] }
    }

    pub fn order(&self) -> usize {
        self.components.len() - 1
    }

    pub fn components(&self) -> &[FieldExpr] {
        &self.components
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &SymmetricTensor, b: f64) -> Result<Self, XrayError> {
        if self.order() != other.order() {
            return Err(XrayError::Invalid(format!("orders differ: {} and {}", self.order(), other.order())));
        }
        let components =
            self.components.iter().zip(&other.components).map(|(p, q)| p.scale(a).add(&q.scale(b))).collect();
        Ok(SymmetricTensor { components })
    }

    /// Value of the lift at `(x, y, φ)`, evaluated through the expression
    /// trees.
    pub fn lift_at(&self, chart: &IsothermalChart, s: State) -> Result<f64, EvalError> {
        let rho = chart.rho.value.eval(s.x, s.y)?;
        let c = self.components.iter().map(|e| e.eval(s.x, s.y)).collect::<Result<Vec<_>, _>>()?;
        Ok(lift_value(rho, &c, s.phi.cos(), s.phi.sin()))
    }
}

/// `Σ_j C(m,j) c_j (v¹)^{m-j} (v²)^j` with `v = e^{-ρ}(cos φ, sin φ)`.
fn lift_value(rho: f64, c: &[f64], cs: f64, sn: f64) -> f64 {
    let m = c.len() - 1;
    let w = (-rho).exp();
    let (a, b) = (w * cs, w * sn);
    let mut total = 0.0;
    for (j, cj) in c.iter().enumerate() {
        total += binomial(m, j) * cj * a.powi((m - j) as i32) * b.powi(j as i32);
    }
    total
}

/// Lift of `f` sampled on the chart grid. The Fourier support `|k| ≤ m`
/// and the parity `k ≡ m (mod 2)` are checked to `1e-12` relative before
/// the higher modes are discarded.
pub fn lift_tensor(f: &SymmetricTensor, chart: &IsothermalChart) -> Result<PhaseFunction, XrayError> {
    let m = f.order();
    let nphi = 4 * (m + 1);
    let grid = chart.grid.clone();
    let integrand = TensorIntegrand::new(chart, &[f]);
    let mut samples = vec![num_complex::Complex64::new(0.0, 0.0); grid.len() * nphi];
    for (idx, x, y) in grid.points() {
        if !grid.mask[idx] {
            continue;
        }
        for j in 0..nphi {
            let mut v = [0.0];
            integrand.eval_into(State::new(x, y, 2.0 * PI * j as f64 / nphi as f64), &mut v)?;
            samples[idx * nphi + j].re = v[0];
        }
    }
    let wide = PhaseFunction::from_samples(grid, nphi, 2 * m + 1, &samples)?;
    let scale = wide.sup_norm().max(f64::MIN_POSITIVE);
    for k in -(2 * m as i32 + 1)..=(2 * m as i32 + 1) {
        let forbidden = k.unsigned_abs() as usize > m || (k - m as i32).rem_euclid(2) == 1;
        if forbidden && wide.mode_sup(k) > 1e-12 * scale {
            return Err(XrayError::Support(format!(
                "order-{m} lift carries mode {k} with size {:.3e}",
                wide.mode_sup(k) / scale
            )));
        }
    }
    Ok(wide.with_kmax(m).filter_modes(|k| (k - m as i32).rem_euclid(2) == 0))
}

/// Function (or several) on `SM` evaluated pointwise along orbits.
pub trait Integrand: Sync {
    fn dim(&self) -> usize;
    fn eval_into(&self, s: State, out: &mut [f64]) -> Result<(), EvalError>;
}

/// Scalar integrand from a closure.
pub struct FnIntegrand<F>(pub F);

impl<F: Fn(State) -> Result<f64, EvalError> + Sync> Integrand for FnIntegrand<F> {
    fn dim(&self) -> usize {
        1
    }

    fn eval_into(&self, s: State, out: &mut [f64]) -> Result<(), EvalError> {
        out[0] = (self.0)(s)?;
        Ok(())
    }
}

/// Lifts of a list of tensors, with all components compiled into one tape.
pub struct TensorIntegrand {
    tape: Tape,
    /// Offset of each tensor's components in the tape outputs (after `ρ`).
    offsets: Vec<(usize, usize)>,
}

impl TensorIntegrand {
    pub fn new(chart: &IsothermalChart, tensors: &[&SymmetricTensor]) -> Self {
        let mut exprs = vec![&chart.rho.value];
        let mut offsets = Vec::with_capacity(tensors.len());
        for t in tensors {
            offsets.push((exprs.len(), t.components.len()));
            exprs.extend(t.components.iter());
        }
        TensorIntegrand { tape: Tape::compile(&exprs), offsets }
    }
}

impl Integrand for TensorIntegrand {
    fn dim(&self) -> usize {
        self.offsets.len()
    }

    fn eval_into(&self, s: State, out: &mut [f64]) -> Result<(), EvalError> {
        let v = self.tape.eval(s.x, s.y)?;
        let (sn, cs) = s.phi.sin_cos();
        for (o, &(start, len)) in out.iter_mut().zip(&self.offsets) {
            *o = lift_value(v[0], &v[start..start + len], cs, sn);
        }
        Ok(())
    }
}

/// `G_E ĥ` for lifts `ĥ` of a list of tensors, evaluated pointwise from the
/// symbolic derivatives of their components.
pub struct PotentialIntegrand {
    tape: Tape,
    field_zero: bool,
    /// Offset and order of each tensor; each component contributes
    /// `(c, c_x, c_y)`.
    offsets: Vec<(usize, usize)>,
}

impl PotentialIntegrand {
    pub fn new(chart: &IsothermalChart, field: &ExternalField, tensors: &[&SymmetricTensor]) -> Self {
        let r = &chart.rho;
        let mut owned: Vec<Expr> =
            vec![r.value.clone(), r.dx.clone(), r.dy.clone(), field.e1.clone(), field.e2.clone()];
        let mut offsets = Vec::with_capacity(tensors.len());
        for t in tensors {
            offsets.push((owned.len(), t.order()));
            for c in &t.components {
                owned.push(c.clone());
                owned.push(c.differentiate(Var::X));
                owned.push(c.differentiate(Var::Y));
            }
        }
        let refs: Vec<&Expr> = owned.iter().collect();
        PotentialIntegrand { tape: Tape::compile(&refs), field_zero: field.is_zero(), offsets }
    }
}

impl Integrand for PotentialIntegrand {
    fn dim(&self) -> usize {
        self.offsets.len()
    }

    fn eval_into(&self, s: State, out: &mut [f64]) -> Result<(), EvalError> {
        let v = self.tape.eval(s.x, s.y)?;
        let (rho, rho_x, rho_y) = (v[0], v[1], v[2]);
        let (sn, cs) = s.phi.sin_cos();
        let w = (-rho).exp();
        let lambda = if self.field_zero { 0.0 } else { rho.exp() * (-v[3] * sn + v[4] * cs) };
        let angular = w * (-rho_x * sn + rho_y * cs) + lambda;
        let pw = |base: f64, e: i64| if e < 0 { 0.0 } else { base.powi(e as i32) };
        for (o, &(start, n)) in out.iter_mut().zip(&self.offsets) {
            let wn = w.powi(n as i32);
            let (mut hx, mut hy, mut hphi) = (0.0, 0.0, 0.0);
            for j in 0..=n {
                let c = &v[start + 3 * j..start + 3 * j + 3];
                let b = binomial(n, j);
                let (p, q) = ((n - j) as i64, j as i64);
                let trig = pw(cs, p) * pw(sn, q);
                hx += b * (c[1] - n as f64 * rho_x * c[0]) * trig;
                hy += b * (c[2] - n as f64 * rho_y * c[0]) * trig;
                hphi +=
                    b * c[0] * (-(p as f64) * pw(cs, p - 1) * pw(sn, q + 1) + q as f64 * pw(cs, p + 1) * pw(sn, q - 1));
            }
            *o = wn * (w * (cs * hx + sn * hy) + angular * hphi);
        }
        Ok(())
    }
}

/// Weights of the composite rule that integrates the piecewise cubic
/// interpolant of samples at the nodes `t` (two Gauss points per interval,
/// four-node Lagrange stencils; nodes need not be equispaced).
pub fn orbit_quadrature_weights(t: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut w = vec![0.0; n];
    if n < 2 {
        return w;
    }
    let g = 0.5 / 3f64.sqrt();
    for i in 0..n - 1 {
        let (lo, len) = if n >= 4 { (i.saturating_sub(1).min(n - 4), 4) } else { (0, n) };
        let nodes = &t[lo..lo + len];
        let h = t[i + 1] - t[i];
        for xi in [0.5 - g, 0.5 + g] {
            let x = t[i] + xi * h;
            for a in 0..len {
                let mut l = 1.0;
                for b in 0..len {
                    if a != b {
                        l *= (x - nodes[b]) / (nodes[a] - nodes[b]);
                    }
                }
                w[lo + a] += 0.5 * h * l;
            }
        }
    }
    w
}

/// Integrals of an integrand along one orbit up to its exit.
#[derive(Debug, Clone, Serialize)]
pub struct OrbitIntegral {
    pub length: f64,
    pub nodes: usize,
    pub values: Vec<f64>,
}

/// `∫₀^τ f(φ_t(s)) dt` on the integrator nodes of the orbit from `s`.
pub fn orbit_integral(flow: &ThermostatFlow, start: State, f: &dyn Integrand) -> Result<OrbitIntegral, XrayError> {
    let orbit = flow.exit_orbit(start, Record::States)?;
    let t: Vec<f64> = orbit.samples.iter().map(|s| s.t).collect();
    let w = orbit_quadrature_weights(&t);
    let mut values = vec![0.0; f.dim()];
    let mut buf = vec![0.0; f.dim()];
    for (sample, wi) in orbit.samples.iter().zip(&w) {
        f.eval_into(sample.state, &mut buf)?;
        for (v, b) in values.iter_mut().zip(&buf) {
            *v += wi * b;
        }
    }
    Ok(OrbitIntegral { length: orbit.duration(), nodes: t.len(), values })
}

/// [`orbit_integral`] over every fan orbit, in fan order.
pub fn fan_integrals(
    flow: &ThermostatFlow,
    fan: &Fan,
    f: &dyn Integrand,
) -> Result<Vec<(FanEntry, OrbitIntegral)>, XrayError> {
    let radius = flow.radius().ok_or(FlowError::NotDisk)?;
    fan.entries(radius)
        .par_iter()
        .map(|e| match orbit_integral(flow, e.state, f) {
            Ok(v) => Ok((*e, v)),
            Err(XrayError::Flow(source)) => {
                Err(XrayError::NoExit { boundary_index: e.boundary_index, angle_index: e.angle_index, source })
            }
            Err(other) => Err(other),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RayValue {
    pub boundary_index: usize,
    pub angle_index: usize,
    /// Boundary arc length `Rψ` in chart coordinates.
    pub s: f64,
    pub theta: f64,
    pub length: f64,
    pub value: f64,
}

/// Ray transform values over a fan of `∂₊SM`.
#[derive(Debug, Clone, Serialize)]
pub struct RayData {
    pub fan: Fan,
    pub radius: f64,
    pub quadrature: &'static str,
    pub step: f64,
    pub max_nodes: usize,
    pub values: Vec<RayValue>,
}

pub const QUADRATURE_RULE: &str = "piecewise-cubic on integrator nodes";

impl RayData {
    fn from_integrals(flow: &ThermostatFlow, fan: &Fan, integrals: &[(FanEntry, OrbitIntegral)], slot: usize) -> Self {
        let radius = flow.radius().expect("disk");
        let values = integrals
            .iter()
            .map(|(e, v)| RayValue {
                boundary_index: e.boundary_index,
                angle_index: e.angle_index,
                s: radius * e.psi,
                theta: e.theta,
                length: v.length,
                value: v.values[slot],
            })
            .collect();
        RayData {
            fan: *fan,
            radius,
            quadrature: QUADRATURE_RULE,
            step: flow.step,
            max_nodes: integrals.iter().map(|(_, v)| v.nodes).max().unwrap_or(0),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn data(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.value).collect()
    }

    /// `max |I_i| / τ_i`.
    pub fn max_relative_to_length(&self) -> f64 {
        self.values.iter().map(|v| v.value.abs() / v.length.max(f64::MIN_POSITIVE)).fold(0.0, f64::max)
    }

    /// CSV `s,theta,value`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "s,theta,value")?;
        for v in &self.values {
            writeln!(out, "{},{},{}", v.s, v.theta + 0.0, v.value + 0.0)?;
        }
        Ok(())
    }
}

/// Ray transform of a symmetric tensor over the fan.
pub fn ray_transform(flow: &ThermostatFlow, f: &SymmetricTensor, fan: &Fan) -> Result<RayData, XrayError> {
    ray_transform_of(flow, &TensorIntegrand::new(flow.chart(), &[f]), fan)
}

/// Ray transform of any scalar integrand over the fan.
pub fn ray_transform_of(flow: &ThermostatFlow, f: &dyn Integrand, fan: &Fan) -> Result<RayData, XrayError> {
    if f.dim() != 1 {
        return Err(XrayError::Invalid(format!("expected a scalar integrand, got {} outputs", f.dim())));
    }
    let integrals = fan_integrals(flow, fan, f)?;
    Ok(RayData::from_integrals(flow, fan, &integrals, 0))
}

/// `G_E h` on the grid for `h` of degree `≤ m - 1`. On a disk `h` must vanish
/// near the boundary (stencil support).
pub fn potential_tensor(frame: &ThermostatFrame, h: &PhaseFunction, m: usize) -> Result<PhaseFunction, XrayError> {
    if m == 0 {
        return Err(XrayError::Support("potentials have order m ≥ 1".into()));
    }
    let degree = h.degree(1e-14 * h.sup_norm());
    if degree > m - 1 {
        return Err(XrayError::Support(format!("h has degree {degree}, expected at most {}", m - 1)));
    }
    if let Domain::Disk { .. } = frame.chart.domain {
        h.check_stencil()?;
    }
    Ok(frame.g_e(&h.with_kmax(m - 1))?.with_kmax(m))
}

/// The `(m-1)`-tensor with one nonzero component
/// `c_j = (R² - x² - y²) x^p y^q`, which vanishes on the boundary circle.
pub fn boundary_vanishing_tensor(order: usize, component: usize, p: u32, q: u32, radius: f64) -> SymmetricTensor {
    let (x, y) = (Expr::x(), Expr::y());
    let bump = Expr::constant(radius * radius).sub(&x.mul(&x)).sub(&y.mul(&y));
    let mut c = monomial(p, q).mul(&bump);
    if c.is_zero() {
        c = bump;
    }
    let mut components = vec![Expr::zero(); order + 1];
    components[component] = c;
    SymmetricTensor { components }
}

fn monomial(p: u32, q: u32) -> Expr {
    let mut e = Expr::constant(1.0);
    for _ in 0..p {
        e = e.mul(&Expr::x());
    }
    for _ in 0..q {
        e = e.mul(&Expr::y());
    }
    e
}

/// Tensors of order `m` whose components are polynomials of degree
/// `≤ degree`; element `(j, p, q)` has `c_j = x^p y^q` and all other
/// components zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorBasis {
    pub order: usize,
    pub degree: u32,
    elements: Vec<(usize, u32, u32)>,
}

pub const DEFAULT_BASIS_DEGREE: u32 = 2;

impl TensorBasis {
    pub fn new(order: usize, degree: u32) -> Self {
        let mut elements = Vec::new();
        for j in 0..=order {
            for d in 0..=degree {
                for q in 0..=d {
                    elements.push((j, d - q, q));
                }
            }
        }
        TensorBasis { order, degree, elements }
    }

    pub fn default_for(order: usize) -> Self {
        TensorBasis::new(order, DEFAULT_BASIS_DEGREE)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[(usize, u32, u32)] {
        &self.elements
    }

    /// `Σ_i a_i e_i` as a tensor with polynomial components.
    pub fn tensor(&self, coefficients: &[f64]) -> SymmetricTensor {
        let mut components = vec![Expr::zero(); self.order + 1];
        for (&(j, p, q), &a) in self.elements.iter().zip(coefficients) {
            if a != 0.0 {
                components[j] = components[j].add(&monomial(p, q).scale(a));
            }
        }
        SymmetricTensor { components }
    }

    pub fn integrand(&self, chart: &IsothermalChart) -> BasisIntegrand {
        BasisIntegrand { basis: self.clone(), rho: Tape::compile(&[&chart.rho.value]) }
    }
}

/// Lifts of all basis elements at once.
pub struct BasisIntegrand {
    basis: TensorBasis,
    rho: Tape,
}

impl Integrand for BasisIntegrand {
    fn dim(&self) -> usize {
        self.basis.len()
    }

    fn eval_into(&self, s: State, out: &mut [f64]) -> Result<(), EvalError> {
        let mut rho = [0.0];
        self.rho.eval_into(s.x, s.y, &mut rho)?;
        let m = self.basis.order;
        let w = (-rho[0]).exp();
        let (sn, cs) = s.phi.sin_cos();
        let (a, b) = (w * cs, w * sn);
        for (o, &(j, p, q)) in out.iter_mut().zip(&self.basis.elements) {
            *o = binomial(m, j) * s.x.powi(p as i32) * s.y.powi(q as i32) * a.powi((m - j) as i32) * b.powi(j as i32);
        }
        Ok(())
    }
}

/// Points of `SM` with `dΣ³` weights on a Cartesian grid over the disk,
/// used to put an `L²` geometry on finite tensor spaces.
#[derive(Debug, Clone)]
pub struct PhaseSamples {
    pub states: Vec<State>,
    pub weights: Vec<f64>,
}

impl PhaseSamples {
    pub fn new(chart: &IsothermalChart, n: usize, nphi: usize) -> Result<Self, XrayError> {
        let radius = chart.radius().ok_or(FlowError::NotDisk)?;
        let grid = Grid2::new(Domain::Disk { radius }, n, n);
        let mut states = Vec::new();
        let mut weights = Vec::new();
        for (_, x, y) in grid.points() {
            if x * x + y * y >= radius * radius {
                continue;
            }
            let w = grid.dx * grid.dy * (2.0 * chart.rho.value.eval(x, y)?).exp() * 2.0 * PI / nphi as f64;
            for j in 0..nphi {
                states.push(State::new(x, y, 2.0 * PI * (j as f64 + 0.5) / nphi as f64));
                weights.push(w);
            }
        }
        Ok(PhaseSamples { states, weights })
    }

    /// Weighted sample matrix: row `i` holds `√w_i f(z_i)`.
    pub fn matrix(&self, f: &dyn Integrand) -> Result<DMatrix<f64>, XrayError> {
        let d = f.dim();
        let rows: Vec<Vec<f64>> = self
            .states
            .par_iter()
            .zip(&self.weights)
            .map(|(s, w)| {
                let mut buf = vec![0.0; d];
                f.eval_into(*s, &mut buf)?;
                let sw = w.sqrt();
                buf.iter_mut().for_each(|v| *v *= sw);
                Ok(buf)
            })
            .collect::<Result<_, EvalError>>()?;
        Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
    }
}

/// Settings shared by the kernel test and tensor recovery.
#[derive(Debug, Clone, Serialize)]
pub struct KernelOptions {
    pub basis: TensorBasis,
    pub fan: Fan,
    /// Singular values below `threshold × σ_max` span the numerical kernel.
    pub threshold: f64,
    /// Components of the potential generators are `(R² - r²)` times
    /// monomials of degree up to this value.
    pub potential_degree: u32,
    pub sample_n: usize,
    pub gram_cap: f64,
    /// Two subspaces share a direction when its principal angle is below
    /// this value.
    pub intersection_angle: f64,
}

impl KernelOptions {
    pub fn new(order: usize) -> Self {
        KernelOptions {
            basis: TensorBasis::default_for(order),
            fan: Fan::new(128, 64),
            threshold: 1e-8,
            potential_degree: DEFAULT_BASIS_DEGREE + 4,
            sample_n: 21,
            gram_cap: 1e12,
            intersection_angle: 1e-4,
        }
    }
}

/// Matrix of the ray transform over a tensor basis, expressed in an
/// `L²`-orthonormal basis of the same span, together with the potentials
/// that lie in that span.
#[derive(Debug, Clone)]
pub struct TensorProblem {
    pub chart: IsothermalChart,
    pub options: KernelOptions,
    /// `A R⁻¹`: rows are fan orbits, columns orthonormal basis directions.
    pub matrix: DMatrix<f64>,
    /// Triangular factor mapping basis coefficients to orthonormal ones.
    pub r: DMatrix<f64>,
    /// Orthonormal sample vectors of the basis lifts.
    pub q: DMatrix<f64>,
    /// Orthonormal coordinates of the potential subspace inside the span.
    pub potentials: DMatrix<f64>,
    pub gram_condition: f64,
    pub samples: PhaseSamples,
    pub orbits: usize,
    pub entries: Vec<FanEntry>,
}

fn sorted_svd(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]).then(i.cmp(&j)));
    let s = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(vt.ncols(), order.len(), |r, c| vt[(order[c], r)]);
    (s, u, v)
}

impl TensorProblem {
    pub fn assemble(flow: &ThermostatFlow, options: &KernelOptions) -> Result<Self, XrayError> {
        let chart = flow.chart();
        let radius = flow.radius().ok_or(FlowError::NotDisk)?;
        let m = options.basis.order;
        let n = options.basis.len();
        let samples = PhaseSamples::new(chart, options.sample_n, 4 * (m + 1))?;
        let b = samples.matrix(&options.basis.integrand(chart))?;
        if b.nrows() < n {
            return Err(XrayError::Invalid("too few sample points for the basis".into()));
        }
        let sv = b.singular_values();
        let (smax, smin) = sv.iter().fold((0.0f64, f64::INFINITY), |(a, c), &s| (a.max(s), c.min(s)));
        let gram_condition = if smin > 0.0 { (smax / smin).powi(2) } else { f64::INFINITY };
        if !(gram_condition <= options.gram_cap) {
            return Err(XrayError::IllConditioned { condition: gram_condition, cap: options.gram_cap });
        }
        let qr = b.qr();
        let (q, r) = (qr.q(), qr.r());
        let r_inv = r
            .clone()
            .try_inverse()
            .ok_or(XrayError::IllConditioned { condition: f64::INFINITY, cap: options.gram_cap })?;

        if options.fan.len() < n {
            return Err(XrayError::Invalid(format!("fan has {} orbits for {n} basis elements", options.fan.len())));
        }
        let integrals = fan_integrals(flow, &options.fan, &options.basis.integrand(chart))?;
        let a = DMatrix::from_fn(integrals.len(), n, |i, j| integrals[i].1.values[j]);
        let matrix = a * r_inv;

        let potentials = if m == 0 {
            DMatrix::zeros(n, 0)
        } else {
            let mut gens = Vec::new();
            for j in 0..m {
                for d in 0..=options.potential_degree {
                    for qd in 0..=d {
                        gens.push(boundary_vanishing_tensor(m - 1, j, d - qd, qd, radius));
                    }
                }
            }
            let refs: Vec<&SymmetricTensor> = gens.iter().collect();
            let p = samples.matrix(&PotentialIntegrand::new(chart, flow.field(), &refs))?;
            let (ps, pu, _) = sorted_svd(&p);
            let rank = ps.iter().filter(|&&s| s > 1e-10 * ps[0]).count();
            let qp = pu.columns(0, rank).into_owned();
            let (cos, u, _) = sorted_svd(&(q.transpose() * qp));
            let keep = cos.iter().filter(|&&c| c >= options.intersection_angle.cos()).count();
            u.columns(0, keep).into_owned()
        };
        Ok(TensorProblem {
            chart: chart.clone(),
            options: options.clone(),
            matrix,
            r,
            q,
            potentials,
            gram_condition,
            samples,
            orbits: integrals.len(),
            entries: integrals.iter().map(|(e, _)| *e).collect(),
        })
    }
}

/// Largest principal angle between two subspaces given by orthonormal
/// columns; `π/2` when the dimensions differ.
pub fn principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() != b.ncols() {
        return 0.5 * PI;
    }
    if a.ncols() == 0 {
        return 0.0;
    }
    let residual = a - b * (b.transpose() * a);
    residual.singular_values().iter().fold(0.0f64, |m, &s| m.max(s)).min(1.0).asin()
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelReport {
    pub m: usize,
    pub basis_dim: usize,
    pub kernel_dim: usize,
    pub potential_dim: usize,
    pub principal_angle: f64,
    pub gap_ratio: f64,
    pub threshold: f64,
    pub singular_values: Vec<f64>,
    pub gram_condition: f64,
    pub fan: Fan,
    pub orbits: usize,
}

/// SVD of the ray transform over a finite tensor basis: numerical kernel,
/// potentials inside the basis span, and their principal angle.
pub fn sinjectivity_test(flow: &ThermostatFlow, options: &KernelOptions) -> Result<KernelReport, XrayError> {
    let problem = TensorProblem::assemble(flow, options)?;
    Ok(problem.kernel_report())
}

impl TensorProblem {
    pub fn kernel_report(&self) -> KernelReport {
        let (s, _, v) = sorted_svd(&self.matrix);
        let smax = s.first().copied().unwrap_or(0.0);
        let cut = self.options.threshold * smax;
        let kept = s.iter().filter(|&&x| x >= cut).count();
        let kernel = v.columns(kept, v.ncols() - kept).into_owned();
        let gap_ratio = match (kept, s.get(kept)) {
            (0, _) => 0.0,
            (_, Some(&dropped)) => s[kept - 1] / dropped.max(f64::MIN_POSITIVE),
            (_, None) => s[kept - 1] / cut.max(f64::MIN_POSITIVE),
        };
        KernelReport {
            m: self.options.basis.order,
            basis_dim: self.options.basis.len(),
            kernel_dim: kernel.ncols(),
            potential_dim: self.potentials.ncols(),
            principal_angle: principal_angle(&kernel, &self.potentials),
            gap_ratio,
            threshold: self.options.threshold,
            singular_values: s,
            gram_condition: self.gram_condition,
            fan: self.options.fan,
            orbits: self.orbits,
        }
    }

    /// Orthonormal coordinates of a tensor's best approximation in the span,
    /// and the sample norm of what is left over.
    pub fn coordinates(&self, f: &SymmetricTensor) -> Result<(DVector<f64>, f64), XrayError> {
        let t = self.samples.matrix(&TensorIntegrand::new(&self.chart, &[f]))?;
        let t = t.column(0).into_owned();
        let y = self.q.transpose() * &t;
        let rest = (&t - &self.q * &y).norm();
        Ok((y, rest))
    }

    /// Splits orthonormal coordinates into the part orthogonal to the
    /// potentials and the potential part.
    pub fn split(&self, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let pot = &self.potentials * (self.potentials.transpose() * y);
        (y - &pot, pot)
    }

    /// Basis coefficients of orthonormal coordinates.
    pub fn coefficients(&self, y: &DVector<f64>) -> DVector<f64> {
        self.r.clone().solve_upper_triangular(y).unwrap_or_else(|| DVector::zeros(y.len()))
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TransportOptions {
    /// Grid size per axis for the sampled solution.
    pub n: usize,
    pub nphi: usize,
    /// Residual nodes lie within this fraction of the radius.
    pub interior_fraction: f64,
    /// Step of the five-point difference along orbits.
    pub delta: f64,
    pub boundary_points: usize,
}

impl Default for TransportOptions {
    fn default() -> Self {
        TransportOptions { n: 17, nphi: 16, interior_fraction: 0.8, delta: 1e-3, boundary_points: 32 }
    }
}

/// `u^f(x, v) = -∫₀^τ f(φ_t(x, v)) dt` sampled on the grid, with its
/// transport residual and boundary values.
#[derive(Debug, Clone, Serialize)]
pub struct TransportSolution {
    #[serde(skip)]
    pub grid: Arc<Grid2>,
    pub nphi: usize,
    /// `values[idx * nphi + j]` at `φ_j = 2πj/nphi`; NaN outside the disk.
    pub values: Vec<f64>,
    /// `sup |G_E u^f - f|` over interior nodes.
    pub residual_sup: f64,
    pub residual_points: usize,
    pub f_sup: f64,
    /// `sup |u^f|` over boundary points and all directions.
    pub boundary_sup: f64,
    pub boundary_points: usize,
}

fn transport_value(flow: &ThermostatFlow, s: State, f: &dyn Integrand) -> Result<f64, XrayError> {
    let radius = flow.radius().ok_or(FlowError::NotDisk)?;
    if flow.boundary_function(s) <= 1e-12 * radius * radius && !flow.points_inward(s) {
        return Ok(0.0);
    }
    Ok(-orbit_integral(flow, s, f)?.values[0])
}

pub fn transport_solution(
    flow: &ThermostatFlow,
    f: &dyn Integrand,
    opts: &TransportOptions,
) -> Result<TransportSolution, XrayError> {
    if f.dim() != 1 {
        return Err(XrayError::Invalid(format!("expected a scalar integrand, got {} outputs", f.dim())));
    }
    let radius = flow.radius().ok_or(FlowError::NotDisk)?;
    let grid = Grid2::new(Domain::Disk { radius }, opts.n, opts.n);
    let nphi = opts.nphi;
    let angle = |j: usize| 2.0 * PI * j as f64 / nphi as f64;
    let nodes: Vec<(usize, f64, f64)> = grid.points().collect();
    let per_node: Vec<(Vec<f64>, Vec<(f64, f64)>)> = nodes
        .par_iter()
        .map(|&(_, x, y)| {
            let r2 = x * x + y * y;
            if r2 > radius * radius {
                return Ok((vec![f64::NAN; nphi], Vec::new()));
            }
            let interior = r2.sqrt() <= opts.interior_fraction * radius;
            let mut values = Vec::with_capacity(nphi);
            let mut checks = Vec::new();
            for j in 0..nphi {
                let z = State::new(x, y, angle(j));
                let u0 = transport_value(flow, z, f)?;
                values.push(u0);
                if interior {
                    let d = opts.delta;
                    let mut u = [0.0; 4];
                    for (slot, k) in [-2.0, -1.0, 1.0, 2.0].iter().enumerate() {
                        u[slot] = transport_value(flow, flow.rk4_step(z, k * d)?, f)?;
                    }
                    let derivative = (u[0] - 8.0 * u[1] + 8.0 * u[2] - u[3]) / (12.0 * d);
                    let mut fz = [0.0];
                    f.eval_into(z, &mut fz)?;
                    checks.push(((derivative - fz[0]).abs(), fz[0].abs()));
                }
            }
            Ok((values, checks))
        })
        .collect::<Result<_, XrayError>>()?;
    let mut values = Vec::with_capacity(grid.len() * nphi);
    let (mut residual_sup, mut f_sup, mut residual_points) = (0.0f64, 0.0f64, 0);
    for (v, checks) in per_node {
        values.extend(v);
        for (r, fz) in checks {
            residual_sup = residual_sup.max(r);
            f_sup = f_sup.max(fz);
            residual_points += 1;
        }
    }
    let boundary: Vec<f64> = (0..opts.boundary_points)
        .into_par_iter()
        .map(|i| {
            let psi = 2.0 * PI * i as f64 / opts.boundary_points as f64;
            let mut worst = 0.0f64;
            for j in 0..nphi {
                let z = State::new(radius * psi.cos(), radius * psi.sin(), angle(j) + 0.5 * PI / nphi as f64);
                worst = worst.max(transport_value(flow, z, f)?.abs());
            }
            Ok(worst)
        })
        .collect::<Result<_, XrayError>>()?;
    Ok(TransportSolution {
        grid,
        nphi,
        values,
        residual_sup,
        residual_points,
        f_sup,
        boundary_sup: boundary.iter().fold(0.0, |a: f64, &b| a.max(b)),
        boundary_points: opts.boundary_points * nphi,
    })
}
