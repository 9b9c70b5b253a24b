//! Calculus on the unit circle bundle `SM` of an isothermal chart.
//!
//! A [`PhaseFunction`] is stored as its vertical Fourier stack
//! `u = Σ_k h_k(x, y) e^{ikφ}`. The vertical field `V` is exact in this
//! representation and the horizontal fields act through the ladder
//! operators `η±`, which only need first spatial derivatives of each mode.

use std::f64::consts::PI;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::Serialize;
use thiserror::Error;

use crate::exprfield::EvalError;
use crate::grid::{Domain, Grid2};
use crate::random::DISK_SUPPORT_FRACTION;
use crate::surface::{ExternalField, IsothermalChart, SurfaceError};

type C = Complex64;
const ZERO: C = C { re: 0.0, im: 0.0 };
const I: C = C { re: 0.0, im: 1.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhaseError {
    #[error("stencil leaves the disk at ({x:.4}, {y:.4}) for mode {mode}")]
    StencilOutOfDomain { mode: i32, x: f64, y: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error("expression evaluation failed: {0}")]
    Eval(#[from] EvalError),
}

/// Complex function on `SM` as a vertical Fourier stack `{h_k : |k| ≤ kmax}`.
#[derive(Clone)]
pub struct PhaseFunction {
    grid: Arc<Grid2>,
    kmax: usize,
    modes: Vec<Vec<C>>,
}

impl fmt::Debug for PhaseFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PhaseFunction").field("grid", &(self.grid.nx, self.grid.ny)).field("kmax", &self.kmax).finish()
    }
}

impl PhaseFunction {
    pub fn zero(grid: Arc<Grid2>, kmax: usize) -> Self {
        let n = grid.len();
        PhaseFunction { grid, kmax, modes: vec![vec![ZERO; n]; 2 * kmax + 1] }
    }

    pub fn from_modes(grid: Arc<Grid2>, kmax: usize, modes: Vec<Vec<C>>) -> Result<Self, PhaseError> {
        if modes.len() != 2 * kmax + 1 || modes.iter().any(|m| m.len() != grid.len()) {
            return Err(PhaseError::ShapeMismatch(format!("expected {} modes of length {}", 2 * kmax + 1, grid.len())));
        }
        Ok(PhaseFunction { grid, kmax, modes })
    }

    /// `h(x, y) e^{ikφ}`.
    pub fn from_mode(grid: Arc<Grid2>, k: i32, h: Vec<C>) -> Result<Self, PhaseError> {
        let kmax = k.unsigned_abs() as usize;
        let mut u = PhaseFunction::zero(grid, kmax);
        if h.len() != u.grid.len() {
            return Err(PhaseError::ShapeMismatch("mode length differs from grid size".into()));
        }
        u.modes[(k + kmax as i32) as usize] = h;
        Ok(u)
    }

    /// Function of the base point only.
    pub fn from_base(grid: Arc<Grid2>, f: &[f64]) -> Self {
        let h = f.iter().map(|&v| C::new(v, 0.0)).collect();
        PhaseFunction { grid, kmax: 0, modes: vec![h] }
    }

    pub fn constant(grid: Arc<Grid2>, c: C) -> Self {
        let h = grid.mask.iter().map(|&m| if m { c } else { ZERO }).collect();
        PhaseFunction { grid, kmax: 0, modes: vec![h] }
    }

    /// Fourier analysis of samples laid out as `samples[idx * nphi + j]` at
    /// `φ_j = 2πj / nphi`.
    pub fn from_samples(grid: Arc<Grid2>, nphi: usize, kmax: usize, samples: &[C]) -> Result<Self, PhaseError> {
        if nphi < 2 * kmax + 1 {
            return Err(PhaseError::ShapeMismatch(format!("nphi = {nphi} cannot resolve kmax = {kmax}")));
        }
        if samples.len() != grid.len() * nphi {
            return Err(PhaseError::ShapeMismatch("sample count differs from grid × nphi".into()));
        }
        let fft = FftPlanner::new().plan_fft_forward(nphi);
        let mut modes = vec![vec![ZERO; grid.len()]; 2 * kmax + 1];
        let mut buf = vec![ZERO; nphi];
        let scale = 1.0 / nphi as f64;
        for idx in 0..grid.len() {
            buf.copy_from_slice(&samples[idx * nphi..(idx + 1) * nphi]);
            fft.process(&mut buf);
            for k in -(kmax as i64)..=(kmax as i64) {
                let slot = k.rem_euclid(nphi as i64) as usize;
                modes[(k + kmax as i64) as usize][idx] = buf[slot] * scale;
            }
        }
        Ok(PhaseFunction { grid, kmax, modes })
    }

    /// Synthesis on `nphi` equispaced fiber angles, layout as in
    /// [`PhaseFunction::from_samples`].
    pub fn samples(&self, nphi: usize) -> Result<Vec<C>, PhaseError> {
        if nphi < 2 * self.kmax + 1 {
            return Err(PhaseError::ShapeMismatch(format!("nphi = {nphi} cannot resolve kmax = {}", self.kmax)));
        }
        let fft = FftPlanner::new().plan_fft_inverse(nphi);
        let mut out = vec![ZERO; self.grid.len() * nphi];
        let mut buf = vec![ZERO; nphi];
        for idx in 0..self.grid.len() {
            buf.iter_mut().for_each(|b| *b = ZERO);
            for k in -(self.kmax as i64)..=(self.kmax as i64) {
                buf[k.rem_euclid(nphi as i64) as usize] = self.modes[(k + self.kmax as i64) as usize][idx];
            }
            fft.process(&mut buf);
            out[idx * nphi..(idx + 1) * nphi].copy_from_slice(&buf);
        }
        Ok(out)
    }

    pub fn grid(&self) -> &Arc<Grid2> {
        &self.grid
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    /// Coefficient `h_k`, or `None` outside the stored range.
    pub fn mode(&self, k: i32) -> Option<&[C]> {
        let j = k + self.kmax as i32;
        if j < 0 || j as usize >= self.modes.len() {
            None
        } else {
            Some(&self.modes[j as usize])
        }
    }

    pub fn modes(&self) -> impl Iterator<Item = (i32, &[C])> {
        let kmax = self.kmax as i32;
        self.modes.iter().enumerate().map(move |(j, m)| (j as i32 - kmax, m.as_slice()))
    }

    /// Evaluates `u(x_idx, y_idx, φ)`.
    pub fn eval_at_node(&self, idx: usize, phi: f64) -> C {
        self.modes().map(|(k, h)| h[idx] * C::from_polar(1.0, k as f64 * phi)).sum()
    }

    pub fn mode_sup(&self, k: i32) -> f64 {
        self.mode(k).map_or(0.0, |h| h.iter().fold(0.0, |a, v| a.max(v.norm())))
    }

    /// Modes whose sup-norm exceeds `tol`.
    pub fn support(&self, tol: f64) -> Vec<i32> {
        self.modes().filter(|(_, h)| h.iter().any(|v| v.norm() > tol)).map(|(k, _)| k).collect()
    }

    /// Largest `|k|` with a mode above `tol` (0 for the zero function).
    pub fn degree(&self, tol: f64) -> usize {
        self.support(tol).iter().map(|k| k.unsigned_abs() as usize).max().unwrap_or(0)
    }

    /// Copy with the stored range changed to `kmax` (drops or zero-pads).
    pub fn with_kmax(&self, kmax: usize) -> Self {
        let mut out = PhaseFunction::zero(self.grid.clone(), kmax);
        for (k, h) in self.modes() {
            if k.unsigned_abs() as usize <= kmax {
                out.modes[(k + kmax as i32) as usize].copy_from_slice(h);
            }
        }
        out
    }

    /// Keeps only the modes with `keep(k)`.
    pub fn filter_modes(&self, keep: impl Fn(i32) -> bool) -> Self {
        let mut out = self.clone();
        let kmax = self.kmax as i32;
        for (j, m) in out.modes.iter_mut().enumerate() {
            if !keep(j as i32 - kmax) {
                m.iter_mut().for_each(|v| *v = ZERO);
            }
        }
        out
    }

    /// The component `u_k` as a phase function.
    pub fn project(&self, k: i32) -> Self {
        self.filter_modes(|j| j == k)
    }

    /// `T_m u = Σ_{|k| ≥ m+1} u_k`.
    pub fn tail(&self, m: usize) -> Self {
        self.filter_modes(|k| k.unsigned_abs() as usize > m)
    }

    fn check_grid(&self, other: &PhaseFunction) -> Result<(), PhaseError> {
        if !Arc::ptr_eq(&self.grid, &other.grid) && (self.grid.nx != other.grid.nx || self.grid.ny != other.grid.ny) {
            return Err(PhaseError::ShapeMismatch("phase functions live on different grids".into()));
        }
        Ok(())
    }

    fn combine(&self, other: &PhaseFunction, f: impl Fn(C, C) -> C) -> Result<Self, PhaseError> {
        self.check_grid(other)?;
        let kmax = self.kmax.max(other.kmax);
        let a = self.with_kmax(kmax);
        let b = other.with_kmax(kmax);
        let modes =
            a.modes.iter().zip(&b.modes).map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()).collect();
        Ok(PhaseFunction { grid: self.grid.clone(), kmax, modes })
    }

    pub fn add(&self, other: &PhaseFunction) -> Result<Self, PhaseError> {
        self.combine(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &PhaseFunction) -> Result<Self, PhaseError> {
        self.combine(other, |a, b| a - b)
    }

    pub fn scale(&self, c: C) -> Self {
        self.map_modes(|_, h| h.iter().map(|v| v * c).collect())
    }

    /// Multiplication by a real function of the base point.
    pub fn mul_base(&self, f: &[f64]) -> Self {
        self.map_modes(|_, h| h.iter().zip(f).map(|(v, s)| v * s).collect())
    }

    fn map_modes(&self, f: impl Fn(i32, &[C]) -> Vec<C>) -> Self {
        let modes = self.modes().map(|(k, h)| f(k, h)).collect();
        PhaseFunction { grid: self.grid.clone(), kmax: self.kmax, modes }
    }

    /// Pointwise product (convolution of the Fourier stacks).
    pub fn mul(&self, other: &PhaseFunction) -> Result<Self, PhaseError> {
        self.check_grid(other)?;
        let kmax = self.kmax + other.kmax;
        let mut out = PhaseFunction::zero(self.grid.clone(), kmax);
        for (a, ha) in self.modes() {
            for (b, hb) in other.modes() {
                let dst = &mut out.modes[(a + b + kmax as i32) as usize];
                for ((d, x), y) in dst.iter_mut().zip(ha).zip(hb) {
                    *d += x * y;
                }
            }
        }
        Ok(out)
    }

    /// `V u`, exact: mode `k` is multiplied by `ik`.
    pub fn vertical(&self) -> Self {
        self.map_modes(|k, h| h.iter().map(|v| v * C::new(0.0, k as f64)).collect())
    }

    pub fn conj(&self) -> Self {
        let kmax = self.kmax as i32;
        let modes = (-kmax..=kmax).map(|k| self.mode(-k).unwrap().iter().map(|v| v.conj()).collect()).collect();
        PhaseFunction { grid: self.grid.clone(), kmax: self.kmax, modes }
    }

    /// Maximum over masked nodes and a fine fiber grid of `|u|`.
    pub fn sup_norm(&self) -> f64 {
        let nphi = (4 * self.kmax + 4).max(16);
        let samples = self.samples(nphi).expect("nphi large enough");
        let mut best: f64 = 0.0;
        for idx in 0..self.grid.len() {
            if self.grid.mask[idx] {
                for s in &samples[idx * nphi..(idx + 1) * nphi] {
                    best = best.max(s.norm());
                }
            }
        }
        best
    }

    /// Zeroes every node whose stencil would leave the domain.
    pub fn restrict_to_stencil_interior(&self) -> Self {
        let grid = self.grid.clone();
        self.map_modes(|_, h| {
            h.iter().enumerate().map(|(idx, v)| if grid.stencil_interior(idx) { *v } else { ZERO }).collect()
        })
    }

    /// True when every mode vanishes exactly outside `r ≤ radius`.
    pub fn supported_within(&self, radius: f64) -> bool {
        self.grid
            .points()
            .all(|(idx, x, y)| (x * x + y * y).sqrt() <= radius || self.modes.iter().all(|h| h[idx] == ZERO))
    }

    /// Fails when a nonzero value sits where the finite-difference stencil
    /// would leave the disk.
    pub fn check_stencil(&self) -> Result<(), PhaseError> {
        if self.grid.domain.is_closed() {
            return Ok(());
        }
        for (k, h) in self.modes() {
            for (idx, x, y) in self.grid.points() {
                if h[idx] != ZERO && !self.grid.stencil_interior(idx) {
                    return Err(PhaseError::StencilOutOfDomain { mode: k, x, y });
                }
            }
        }
        Ok(())
    }
}

/// Which frame field to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameField {
    X,
    XPerp,
    V,
    GE,
    EtaPlus,
    EtaMinus,
    MuPlus,
    MuMinus,
}

impl FromStr for FrameField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "X" => FrameField::X,
            "Xperp" | "X_perp" => FrameField::XPerp,
            "V" => FrameField::V,
            "G_E" | "GE" => FrameField::GE,
            "eta+" | "eta_plus" => FrameField::EtaPlus,
            "eta-" | "eta_minus" => FrameField::EtaMinus,
            "mu+" | "mu_plus" => FrameField::MuPlus,
            "mu-" | "mu_minus" => FrameField::MuMinus,
            _ => return Err(format!("unknown frame field '{s}'")),
        })
    }
}

/// Precomputed grid samples of the chart and field quantities used by the
/// frame operators.
#[derive(Debug, Clone)]
pub struct ThermostatFrame {
    pub chart: IsothermalChart,
    pub field: ExternalField,
    pub grid: Arc<Grid2>,
    pub rho: Vec<f64>,
    pub exp_neg_rho: Vec<f64>,
    pub exp_2rho: Vec<f64>,
    /// `∂ρ = ½(ρ_x - iρ_y)`.
    pub d_rho: Vec<C>,
    /// `α_z = ½(E¹ - iE²)`.
    pub alpha_z: Vec<C>,
    /// `λ_1`, the `e^{iφ}` coefficient of `λ`; `λ_{-1}` is its conjugate.
    pub lambda1: Vec<C>,
    pub gauss: Vec<f64>,
    pub divergence: Vec<f64>,
    /// `𝕂 = K - div_g E`.
    pub thermostat_curvature: Vec<f64>,
    /// Quadrature weights of `dΣ³` after fiber integration.
    weights: Vec<f64>,
}

impl ThermostatFrame {
    pub fn new(chart: &IsothermalChart, field: &ExternalField) -> Result<Self, PhaseError> {
        field.validate(chart)?;
        let grid = chart.grid.clone();
        let n = grid.len();
        let mut frame = ThermostatFrame {
            chart: chart.clone(),
            field: field.clone(),
            grid: grid.clone(),
            rho: vec![0.0; n],
            exp_neg_rho: vec![0.0; n],
            exp_2rho: vec![0.0; n],
            d_rho: vec![ZERO; n],
            alpha_z: vec![ZERO; n],
            lambda1: vec![ZERO; n],
            gauss: vec![0.0; n],
            divergence: vec![0.0; n],
            thermostat_curvature: vec![0.0; n],
            weights: vec![0.0; n],
        };
        let base = grid.weights();
        for (idx, x, y) in grid.points() {
            if !grid.mask[idx] {
                continue;
            }
            let p = chart.at(x, y)?;
            let e = field.at(x, y)?;
            let k = chart.curvature_at(x, y)?;
            let div = e.e1_x + e.e2_y + 2.0 * (p.rho_x * e.e1 + p.rho_y * e.e2);
            frame.rho[idx] = p.rho;
            frame.exp_neg_rho[idx] = (-p.rho).exp();
            frame.exp_2rho[idx] = (2.0 * p.rho).exp();
            frame.d_rho[idx] = C::new(0.5 * p.rho_x, -0.5 * p.rho_y);
            frame.alpha_z[idx] = C::new(0.5 * e.e1, -0.5 * e.e2);
            frame.lambda1[idx] = I * p.rho.exp() * frame.alpha_z[idx];
            frame.gauss[idx] = k;
            frame.divergence[idx] = div;
            frame.thermostat_curvature[idx] = k - div;
            frame.weights[idx] = 2.0 * PI * base[idx] * frame.exp_2rho[idx];
        }
        Ok(frame)
    }

    /// `(∂h_k, ∂̄h_k)` for every mode.
    fn complex_derivatives(&self, u: &PhaseFunction, checked: bool) -> Result<Vec<(Vec<C>, Vec<C>)>, PhaseError> {
        if checked {
            u.check_stencil()?;
        }
        Ok(u.modes
            .par_iter()
            .map(|h| {
                let (hx, hy) = self.grid.gradient(h);
                let d = hx.iter().zip(&hy).map(|(a, b)| 0.5 * (a - I * b)).collect();
                let db = hx.iter().zip(&hy).map(|(a, b)| 0.5 * (a + I * b)).collect();
                (d, db)
            })
            .collect())
    }

    /// `(η₊u, η₋u)`, each stored with `kmax + 1`.
    pub fn ladder(&self, u: &PhaseFunction) -> Result<(PhaseFunction, PhaseFunction), PhaseError> {
        self.ladder_impl(u, true)
    }

    fn ladder_impl(&self, u: &PhaseFunction, checked: bool) -> Result<(PhaseFunction, PhaseFunction), PhaseError> {
        let derivs = self.complex_derivatives(u, checked)?;
        let kmax = u.kmax + 1;
        let mut plus = PhaseFunction::zero(self.grid.clone(), kmax);
        let mut minus = PhaseFunction::zero(self.grid.clone(), kmax);
        for ((k, h), (d, db)) in u.modes().zip(&derivs) {
            let kf = k as f64;
            let dst_p = &mut plus.modes[(k + 1 + kmax as i32) as usize];
            let dst_m = &mut minus.modes[(k - 1 + kmax as i32) as usize];
            for idx in 0..h.len() {
                let w = self.exp_neg_rho[idx];
                let dr = self.d_rho[idx];
                dst_p[idx] = w * (d[idx] - kf * h[idx] * dr);
                dst_m[idx] = w * (db[idx] + kf * h[idx] * dr.conj());
            }
        }
        Ok((plus, minus))
    }

    pub fn eta_plus(&self, u: &PhaseFunction) -> Result<PhaseFunction, PhaseError> {
        Ok(self.ladder(u)?.0)
    }

    pub fn eta_minus(&self, u: &PhaseFunction) -> Result<PhaseFunction, PhaseError> {
        Ok(self.ladder(u)?.1)
    }

    pub fn x(&self, u: &PhaseFunction) -> Result<PhaseFunction, PhaseError> {
        let (p, m) = self.ladder(u)?;
        p.add(&m)
    }

    /// `X⊥ = i(η₋ - η₊)`.
    pub fn x_perp(&self, u: &PhaseFunction) -> Result<PhaseFunction, PhaseError> {
        let (p, m) = self.ladder(u)?;
        Ok(m.sub(&p)?.scale(I))
    }

    /// `λ` as a phase function (modes ±1 only).
    pub fn lambda(&self) -> PhaseFunction {
        let minus = self.lambda1.iter().map(|v| v.conj()).collect();
        PhaseFunction::from_modes(self.grid.clone(), 1, vec![minus, vec![ZERO; self.grid.len()], self.lambda1.clone()])
            .expect("three modes")
    }

    /// `Vλ = -⟨E, v⟩`.
    pub fn v_lambda(&self) -> PhaseFunction {
        self.lambda().vertical()
    }

    /// `λ_{+1} u` shifted up and `λ_{-1} u` shifted down.
    fn lambda_parts(&self, u: &PhaseFunction) -> (PhaseFunction, PhaseFunction) {
        let kmax = u.kmax + 1;
        let mut up = PhaseFunction::zero(self.grid.clone(), kmax);
        let mut down = PhaseFunction::zero(self.grid.clone(), kmax);
        for (k, h) in u.modes() {
            let dst_u = &mut up.modes[(k + 1 + kmax as i32) as usize];
            for (idx, v) in h.iter().enumerate() {
                dst_u[idx] = self.lambda1[idx] * v;
            }
            let dst_d = &mut down.modes[(k - 1 + kmax as i32) as usize];
            for (idx, v) in h.iter().enumerate() {
                dst_d[idx] = self.lambda1[idx].conj() * v;
            }
        }
        (up, down)
    }

    /// Multiplication by `λ`.
    pub fn lambda_mul(&self, u: &PhaseFunction) -> PhaseFunction {
        let (up, down) = self.lambda_parts(u);
        up.add(&down).expect("same grid")
    }

    pub fn mu_plus(&self, u: &PhaseFunction) -> Result<PhaseFunction, PhaseError> {
        let eta = self.eta_plus(u)?;
        eta.add(&self.lambda_parts(&u.vertical()).0)
    }

    pub fn mu_minus(&self, u: &PhaseFunction) -> Result<PhaseFunction, PhaseError> {
        let eta = self.eta_minus(u)?;
        eta.add(&self.lambda_parts(&u.vertical()).1)
    }

    /// `G_E = X + λV`.
    pub fn g_e(&self, u: &PhaseFunction) -> Result<PhaseFunction, PhaseError> {
        self.x(u)?.add(&self.lambda_mul(&u.vertical()))
    }

    pub fn apply(&self, which: FrameField, u: &PhaseFunction) -> Result<PhaseFunction, PhaseError> {
        match which {
            FrameField::X => self.x(u),
            FrameField::XPerp => self.x_perp(u),
            FrameField::V => Ok(u.vertical()),
            FrameField::GE => self.g_e(u),
            FrameField::EtaPlus => self.eta_plus(u),
            FrameField::EtaMinus => self.eta_minus(u),
            FrameField::MuPlus => self.mu_plus(u),
            FrameField::MuMinus => self.mu_minus(u),
        }
    }

    /// `μ₊(h e^{imφ}) = e^{(m-1)ρ}(∂ - m e^{2ρ} α_z)(h e^{-mρ}) e^{i(m+1)φ}`,
    /// differentiating the product `h e^{-mρ}` directly.
    pub fn mu_plus_coordinate(&self, m: i32, h: &[C]) -> Result<PhaseFunction, PhaseError> {
        let mf = m as f64;
        let product: Vec<C> = h.iter().zip(&self.rho).map(|(v, r)| v * (-mf * r).exp()).collect();
        let probe = PhaseFunction::from_mode(self.grid.clone(), m, product.clone())?;
        probe.check_stencil()?;
        let (px, py) = self.grid.gradient(&product);
        let out = (0..h.len())
            .map(|idx| {
                let d = 0.5 * (px[idx] - I * py[idx]);
                let r = self.rho[idx];
                ((mf - 1.0) * r).exp() * (d - mf * (2.0 * r).exp() * self.alpha_z[idx] * product[idx])
            })
            .collect();
        PhaseFunction::from_mode(self.grid.clone(), m + 1, out)
    }

    /// `(u, v) = ∫ u v̄ dΣ³`.
    pub fn inner_product(&self, u: &PhaseFunction, v: &PhaseFunction) -> Result<C, PhaseError> {
        u.check_grid(v)?;
        if u.grid.len() != self.grid.len() {
            return Err(PhaseError::ShapeMismatch("phase function not on the frame grid".into()));
        }
        let mut total = ZERO;
        for (k, h) in u.modes() {
            if let Some(g) = v.mode(k) {
                let s: C = h.iter().zip(g).zip(&self.weights).map(|((a, b), w)| a * b.conj() * w).sum();
                total += s;
            }
        }
        Ok(total)
    }

    pub fn norm_sq(&self, u: &PhaseFunction) -> Result<f64, PhaseError> {
        Ok(self.inner_product(u, u)?.re)
    }

    /// Per-node weights of `dΣ³` after fiber integration.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `(u, v)` by quadrature of samples on `nphi` fiber angles; the
    /// Parseval check compares this with [`ThermostatFrame::inner_product`].
    pub fn inner_product_sampled(&self, u: &PhaseFunction, v: &PhaseFunction, nphi: usize) -> Result<C, PhaseError> {
        let a = u.samples(nphi)?;
        let b = v.samples(nphi)?;
        let mut total = ZERO;
        for idx in 0..self.grid.len() {
            let s: C = (0..nphi).map(|j| a[idx * nphi + j] * b[idx * nphi + j].conj()).sum();
            total += s * self.weights[idx] / nphi as f64;
        }
        Ok(total)
    }

    /// `‖u‖²_{H¹} = ‖G_E u‖² + ‖X⊥u - VλVu‖² + ‖Vu‖² + ‖u‖²`.
    pub fn h1_norm_sq(&self, u: &PhaseFunction) -> Result<f64, PhaseError> {
        let vu = u.vertical();
        let ge = self.g_e(u)?;
        let horiz = self.x_perp(u)?.sub(&self.v_lambda().mul(&vu)?)?;
        Ok(self.norm_sq(&ge)? + self.norm_sq(&horiz)? + self.norm_sq(&vu)? + self.norm_sq(u)?)
    }

    pub fn h1_norm(&self, u: &PhaseFunction) -> Result<f64, PhaseError> {
        Ok(self.h1_norm_sq(u)?.sqrt())
    }

    /// `𝕂` through the frame: `K + X⊥λ + λ² + G_E Vλ`. On a disk the
    /// result is only meaningful at stencil-interior nodes and is zeroed
    /// elsewhere.
    pub fn thermostat_curvature_via_frame(&self) -> Result<PhaseFunction, PhaseError> {
        let terms = self.thermostat_curvature_terms()?;
        let mut total = terms[0].clone();
        for t in &terms[1..] {
            total = total.add(t)?;
        }
        Ok(total)
    }

    /// `K`, `X⊥λ`, `λ²` and `G_E Vλ`, restricted to stencil-interior nodes.
    fn thermostat_curvature_terms(&self) -> Result<Vec<PhaseFunction>, PhaseError> {
        let lambda = self.lambda();
        let vl = self.v_lambda();
        let (lp, lm) = self.ladder_impl(&lambda, false)?;
        let x_perp_lambda = lm.sub(&lp)?.scale(I);
        let (vp, vm) = self.ladder_impl(&vl, false)?;
        let ge_vl = vp.add(&vm)?.add(&self.lambda_mul(&vl.vertical()))?;
        let k = PhaseFunction::from_base(self.grid.clone(), &self.gauss);
        Ok([k, x_perp_lambda, lambda.mul(&lambda)?, ge_vl].iter().map(|t| t.restrict_to_stencil_interior()).collect())
    }

    pub fn mul_thermostat_curvature(&self, u: &PhaseFunction) -> PhaseFunction {
        u.mul_base(&self.thermostat_curvature)
    }
}

/// One verified integral identity.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ResidualRecord {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_residual: f64,
    pub rel_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl ResidualRecord {
    /// Record for a scalar identity `lhs = rhs` with relative scale `scale`.
    pub fn scalar(name: impl Into<String>, lhs: f64, rhs: f64, scale: f64, tolerance: f64) -> Self {
        let abs_residual = (lhs - rhs).abs();
        let rel_residual = if scale > 0.0 { abs_residual / scale } else { abs_residual };
        ResidualRecord {
            name: name.into(),
            lhs,
            rhs,
            abs_residual,
            rel_residual,
            tolerance,
            pass: rel_residual <= tolerance,
        }
    }

    fn worst(name: &str, records: Vec<ResidualRecord>) -> Self {
        let mut worst =
            records.into_iter().max_by(|a, b| a.rel_residual.total_cmp(&b.rel_residual)).expect("at least one record");
        worst.name = name.to_string();
        worst
    }
}

/// Writes the CSV summary `name,rel_residual,pass`.
pub fn write_records_csv<W: Write>(records: &[ResidualRecord], mut out: W) -> io::Result<()> {
    writeln!(out, "name,rel_residual,pass")?;
    for r in records {
        writeln!(out, "{},{:e},{}", r.name, r.rel_residual, r.pass)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Identity {
    StructureEqs,
    LieDerivative,
    Adjoints,
    PestovClosed,
    PestovBoundary,
    Commutator,
    MuDecomposition,
    GkIdentity,
    LadderExpansions,
    ThermostatCurvature,
}

impl Identity {
    pub const ALL: [Identity; 10] = [
        Identity::StructureEqs,
        Identity::LieDerivative,
        Identity::Adjoints,
        Identity::PestovClosed,
        Identity::PestovBoundary,
        Identity::Commutator,
        Identity::MuDecomposition,
        Identity::GkIdentity,
        Identity::LadderExpansions,
        Identity::ThermostatCurvature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Identity::StructureEqs => "structure_eqs",
            Identity::LieDerivative => "lie_derivative",
            Identity::Adjoints => "adjoints",
            Identity::PestovClosed => "pestov_closed",
            Identity::PestovBoundary => "pestov_boundary",
            Identity::Commutator => "commutator",
            Identity::MuDecomposition => "mu_decomposition",
            Identity::GkIdentity => "gk_identity",
            Identity::LadderExpansions => "ladder_expansions",
            Identity::ThermostatCurvature => "thermostat_curvature",
        }
    }

    pub fn default_tolerance(self) -> f64 {
        1e-6
    }

    fn needs_v(self) -> bool {
        matches!(self, Identity::Adjoints)
    }
}

impl FromStr for Identity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Identity::ALL.iter().copied().find(|i| i.name() == s).ok_or_else(|| format!("unknown identity '{s}'"))
    }
}

/// `lhs = rhs` for fields, relative to the largest sup-norm among both sides
/// and the `terms` they are assembled from.
fn field_record(
    name: &str,
    lhs: &PhaseFunction,
    rhs: &PhaseFunction,
    terms: &[&PhaseFunction],
    tolerance: f64,
) -> Result<ResidualRecord, PhaseError> {
    let l = lhs.sup_norm();
    let r = rhs.sup_norm();
    let diff = lhs.sub(rhs)?.sup_norm();
    let scale = terms.iter().fold(l.max(r), |m, t| m.max(t.sup_norm()));
    let rel = if scale > 0.0 { diff / scale } else { diff };
    Ok(ResidualRecord {
        name: name.to_string(),
        lhs: l,
        rhs: r,
        abs_residual: diff,
        rel_residual: rel,
        tolerance,
        pass: rel <= tolerance,
    })
}

/// `Σ terms = 0` for complex terms, scaled by `Σ |terms|`.
fn zero_sum_record(name: &str, terms: &[C], tolerance: f64) -> ResidualRecord {
    let sum: C = terms.iter().sum();
    let scale: f64 = terms.iter().map(|t| t.norm()).sum();
    ResidualRecord::scalar(name, sum.norm(), 0.0, scale, tolerance)
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<(), PhaseError> {
    if cond {
        Ok(())
    } else {
        Err(PhaseError::Hypothesis(msg()))
    }
}

fn check_support(frame: &ThermostatFrame, u: &PhaseFunction, closed_only: bool) -> Result<(), PhaseError> {
    match frame.chart.domain {
        Domain::Torus { .. } => Ok(()),
        Domain::Disk { radius } => {
            require(!closed_only, || "identity requires a closed chart".into())?;
            require(u.supported_within(DISK_SUPPORT_FRACTION * radius), || {
                format!("test function must vanish outside r = {}R", DISK_SUPPORT_FRACTION)
            })
        }
    }
}

/// Quadrature check of one identity for the test function `u` (and `v`
/// where the identity is bilinear).
pub fn identity_report(
    identity: Identity,
    frame: &ThermostatFrame,
    u: &PhaseFunction,
    v: Option<&PhaseFunction>,
    tolerance: f64,
) -> Result<ResidualRecord, PhaseError> {
    let name = identity.name();
    if identity.needs_v() && v.is_none() {
        return Err(PhaseError::Hypothesis(format!("{name} needs a second test function")));
    }
    match identity {
        Identity::PestovClosed | Identity::GkIdentity | Identity::LadderExpansions => check_support(frame, u, true)?,
        Identity::PestovBoundary => {
            require(!frame.chart.domain.is_closed(), || "pestov_boundary requires a chart with boundary".into())?;
            check_support(frame, u, false)?;
        }
        _ => check_support(frame, u, false)?,
    }
    if let Some(v) = v {
        check_support(frame, v, false)?;
    }
    let ip = |a: &PhaseFunction, b: &PhaseFunction| frame.inner_product(a, b);
    let nsq = |a: &PhaseFunction| frame.norm_sq(a);
    match identity {
        Identity::StructureEqs => {
            let xu = frame.x(u)?;
            let xpu = frame.x_perp(u)?;
            let vu = u.vertical();
            // X = [V, X⊥]
            let (vxp, xpv) = (xpu.vertical(), frame.x_perp(&vu)?);
            let r1 = field_record(name, &vxp.sub(&xpv)?, &xu, &[&vxp, &xpv], tolerance)?;
            // X⊥ = [X, V]
            let (xv, vx) = (frame.x(&vu)?, xu.vertical());
            let r2 = field_record(name, &xv.sub(&vx)?, &xpu, &[&xv, &vx], tolerance)?;
            // [X, X⊥] = -KV
            let (xxp, xpx) = (frame.x(&xpu)?, frame.x_perp(&xu)?);
            let kv = vu.mul_base(&frame.gauss).scale(C::new(-1.0, 0.0));
            let r3 = field_record(name, &xxp.sub(&xpx)?, &kv, &[&xxp, &xpx], tolerance)?;
            Ok(ResidualRecord::worst(name, vec![r1, r2, r3]))
        }
        Identity::LieDerivative => {
            let one = PhaseFunction::constant(frame.grid.clone(), C::new(1.0, 0.0));
            let a = ip(&frame.g_e(u)?, &one)?;
            let b = ip(&frame.v_lambda().mul(u)?, &one)?;
            Ok(zero_sum_record(name, &[a, b], tolerance))
        }
        Identity::Adjoints => {
            let v = v.expect("checked");
            let r1 = zero_sum_record(name, &[ip(&u.vertical(), v)?, ip(u, &v.vertical())?], tolerance);
            let r2 = zero_sum_record(name, &[ip(&frame.x_perp(u)?, v)?, ip(u, &frame.x_perp(v)?)?], tolerance);
            let r3 = zero_sum_record(
                name,
                &[ip(&frame.g_e(u)?, v)?, ip(u, &frame.g_e(v)?)?, ip(&frame.v_lambda().mul(u)?, v)?],
                tolerance,
            );
            Ok(ResidualRecord::worst(name, vec![r1, r2, r3]))
        }
        Identity::PestovClosed | Identity::PestovBoundary => {
            let vu = u.vertical();
            let gev = nsq(&frame.g_e(&vu)?)?;
            let kvv = ip(&frame.mul_thermostat_curvature(&vu), &vu)?.re;
            let ge = frame.g_e(u)?;
            let vge = nsq(&ge.vertical())?;
            let ge2 = nsq(&ge)?;
            let scale = gev.abs() + kvv.abs() + vge.abs() + ge2.abs();
            Ok(ResidualRecord::scalar(name, gev - kvv, vge - ge2, scale, tolerance))
        }
        Identity::Commutator => {
            let (gv, vg) = (frame.g_e(&u.vertical())?, frame.g_e(u)?.vertical());
            let rhs = frame.x_perp(u)?.sub(&frame.v_lambda().mul(&u.vertical())?)?;
            field_record(name, &gv.sub(&vg)?, &rhs, &[&gv, &vg], tolerance)
        }
        Identity::MuDecomposition => {
            let lhs = frame.x_perp(u)?.sub(&frame.v_lambda().mul(&u.vertical())?)?;
            let (mm, mp) = (frame.mu_minus(u)?, frame.mu_plus(u)?);
            let rhs = mm.sub(&mp)?.scale(I);
            field_record(name, &lhs, &rhs, &[&mm, &mp], tolerance)
        }
        Identity::GkIdentity => {
            let support = u.support(0.0);
            require(support.len() == 1 && support[0] != 0, || "gk_identity needs u in a single mode k ≠ 0".into())?;
            let k = support[0] as f64;
            let mm = nsq(&frame.mu_minus(u)?)?;
            let mp = nsq(&frame.mu_plus(u)?)?;
            let kuu = ip(&frame.mul_thermostat_curvature(u), u)?.re;
            let lhs = 2.0 * k * mm;
            let rhs = 2.0 * k * mp + k * k * kuu;
            let scale = (2.0 * k * mm).abs() + (2.0 * k * mp).abs() + (k * k * kuu).abs();
            Ok(ResidualRecord::scalar(name, lhs, rhs, scale, tolerance))
        }
        Identity::LadderExpansions => {
            let support = u.support(0.0);
            let m = support.iter().map(|k| k.unsigned_abs() as usize).min().unwrap_or(0);
            require(m >= 2, || "ladder_expansions needs u in the sum of modes |k| ≥ m with m ≥ 2".into())?;
            let mi = m as i32;
            let mode = |k: i32| u.project(k);
            let mm1 = nsq(&frame.mu_minus(&mode(mi + 1))?)?;
            let mm0 = nsq(&frame.mu_minus(&mode(mi))?)?;
            let mp1 = nsq(&frame.mu_plus(&mode(-mi - 1))?)?;
            let mp0 = nsq(&frame.mu_plus(&mode(-mi))?)?;
            let mf = m as f64;
            let ge = frame.g_e(u)?;
            let gev = frame.g_e(&u.vertical())?;
            let vge = ge.vertical();
            let v = ge.tail(m);
            let w = gev.tail(m);
            let q = vge.tail(m);
            let lhs1 = nsq(&ge)?;
            let rhs1 = mm1 + mm0 + mp1 + mp0 + nsq(&v)?;
            let lhs2 = nsq(&gev)?;
            let rhs2 = (mf + 1.0).powi(2) * (mm1 + mp1) + mf * mf * (mm0 + mp0) + nsq(&w)?;
            let lhs3 = nsq(&vge)?;
            let rhs3 = mf * mf * (mm1 + mp1) + (mf - 1.0).powi(2) * (mm0 + mp0) + nsq(&q)?;
            Ok(ResidualRecord::worst(
                name,
                vec![
                    ResidualRecord::scalar(name, lhs1, rhs1, lhs1.abs() + rhs1.abs(), tolerance),
                    ResidualRecord::scalar(name, lhs2, rhs2, lhs2.abs() + rhs2.abs(), tolerance),
                    ResidualRecord::scalar(name, lhs3, rhs3, lhs3.abs() + rhs3.abs(), tolerance),
                ],
            ))
        }
        Identity::ThermostatCurvature => {
            let terms = frame.thermostat_curvature_terms()?;
            let via = frame.thermostat_curvature_via_frame()?;
            let direct = PhaseFunction::from_base(frame.grid.clone(), &frame.thermostat_curvature)
                .restrict_to_stencil_interior();
            field_record(name, &via, &direct, &terms.iter().collect::<Vec<_>>(), tolerance)
        }
    }
}

/// `sup|μ̃₊(e^{mσ}u) - e^{(m-1)σ}μ₊u|` relative to the sup of the right side,
/// where `μ̃₊` belongs to `(e^{2σ}g, e^{-2σ}E)` and `u = h e^{imφ}`.
pub fn mu_plus_covariance_residual(
    frame: &ThermostatFrame,
    sigma: &crate::exprfield::FieldExpr,
    m: i32,
    h: &[C],
) -> Result<f64, PhaseError> {
    let chart = frame.chart.conformally_rescaled(sigma)?;
    let field = frame.field.conformally_rescaled(sigma);
    let rescaled = ThermostatFrame::new(&chart, &field)?;
    let mut s = Vec::with_capacity(frame.grid.len());
    for (_, x, y) in frame.grid.points() {
        s.push(sigma.eval(x, y)?);
    }
    let scaled: Vec<C> = h.iter().zip(&s).map(|(v, s)| v * (m as f64 * s).exp()).collect();
    let lhs = rescaled.mu_plus(&PhaseFunction::from_mode(frame.grid.clone(), m, scaled)?)?;
    let base = frame.mu_plus(&PhaseFunction::from_mode(frame.grid.clone(), m, h.to_vec())?)?;
    let factor: Vec<f64> = s.iter().map(|s| ((m as f64 - 1.0) * s).exp()).collect();
    let rhs = base.mul_base(&factor);
    let scale = rhs.sup_norm();
    let diff = lhs.sub(&rhs)?.sup_norm();
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

/// Spatial degree of random identity inputs (half the default `kmax`).
pub const SUITE_SPATIAL_DEGREE: u32 = 8;

/// Runs every identity that applies to the frame's chart on seeded random
/// bandlimited inputs. On a torus `gk_identity` is run for `k = 1..=4`; on
/// a disk the boundary variants are used.
pub fn run_identity_suite(
    frame: &ThermostatFrame,
    rng: &mut impl rand::Rng,
    spatial_degree: u32,
    tolerance: f64,
) -> Result<Vec<ResidualRecord>, PhaseError> {
    use crate::random::PhaseSpec;
    let domain = frame.chart.domain;
    let u = PhaseSpec::random(rng, domain, &[-3, -2, 2, 3, 4], spatial_degree, 1.0).sample(&frame.grid);
    let v = PhaseSpec::random(rng, domain, &[-1, 0, 1, 2], spatial_degree, 1.0).sample(&frame.grid);
    let mut out = Vec::new();
    let closed = domain.is_closed();
    out.push(identity_report(Identity::StructureEqs, frame, &u, None, tolerance)?);
    out.push(identity_report(Identity::LieDerivative, frame, &v, None, tolerance)?);
    out.push(identity_report(Identity::Adjoints, frame, &u, Some(&v), tolerance)?);
    let pestov = if closed { Identity::PestovClosed } else { Identity::PestovBoundary };
    out.push(identity_report(pestov, frame, &u.add(&v)?, None, tolerance)?);
    out.push(identity_report(Identity::Commutator, frame, &u, None, tolerance)?);
    out.push(identity_report(Identity::MuDecomposition, frame, &u, None, tolerance)?);
    if closed {
        for k in 1..=4 {
            let uk = PhaseSpec::random(rng, domain, &[k], spatial_degree, 1.0).sample(&frame.grid);
            let mut r = identity_report(Identity::GkIdentity, frame, &uk, None, tolerance)?;
            r.name = format!("gk_identity[k={k}]");
            out.push(r);
        }
        out.push(identity_report(Identity::LadderExpansions, frame, &u, None, tolerance)?);
    }
    out.push(identity_report(Identity::ThermostatCurvature, frame, &u, None, tolerance)?);
    Ok(out)
}

/// Pestov residuals for the same closed-form input at a coarse and a fine
/// resolution. `lhs` is the coarse residual, `rhs` the fine one and
/// `rel_residual` their ratio `fine / coarse`; the record passes when the
/// ratio is at most `tolerance`.
pub fn pestov_refinement(
    chart: &IsothermalChart,
    field: &ExternalField,
    spec: &crate::random::PhaseSpec,
    coarse: usize,
    fine: usize,
    tolerance: f64,
) -> Result<ResidualRecord, PhaseError> {
    let residual = |n: usize| -> Result<f64, PhaseError> {
        let c = chart.with_resolution(n, n)?;
        let f = ThermostatFrame::new(&c, field)?;
        let u = spec.sample(&f.grid);
        let id = if c.domain.is_closed() { Identity::PestovClosed } else { Identity::PestovBoundary };
        Ok(identity_report(id, &f, &u, None, 1.0)?.rel_residual)
    };
    let a = residual(coarse)?;
    let b = residual(fine)?;
    let ratio = if a > 0.0 { b / a } else { 0.0 };
    Ok(ResidualRecord {
        name: format!("pestov_refinement[{coarse}->{fine}]"),
        lhs: a,
        rhs: b,
        abs_residual: b,
        rel_residual: ratio,
        tolerance,
        pass: ratio <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprfield::parse;
    use crate::random::{rng, PhaseSpec};

    fn torus_frame(rho: &str, e1: &str, e2: &str, n: usize) -> ThermostatFrame {
        let chart = IsothermalChart::new(Domain::Torus { length: 2.0 * PI }, parse(rho).unwrap(), n, n).unwrap();
        ThermostatFrame::new(&chart, &ExternalField::new(parse(e1).unwrap(), parse(e2).unwrap())).unwrap()
    }

    #[test]
    fn vertical_is_exact() {
        let f = torus_frame("0", "0", "0", 8);
        let h = vec![C::new(1.0, 0.0); 64];
        let u = PhaseFunction::from_mode(f.grid.clone(), 3, h).unwrap();
        let vu = u.vertical();
        assert_eq!(vu.mode(3).unwrap()[5], C::new(0.0, 3.0));
    }

    #[test]
    fn flat_x_of_coordinate_function() {
        let f = torus_frame("0", "0", "0", 16);
        // sin(x) ≈ x near 0; X sin(x) = cos(x) cosφ
        let h: Vec<f64> = f.grid.points().map(|(_, x, _)| x.sin()).collect();
        let xu = f.x(&PhaseFunction::from_base(f.grid.clone(), &h)).unwrap();
        for (idx, x, _) in f.grid.points() {
            let phi = 0.7;
            assert!((xu.eval_at_node(idx, phi) - C::new(x.cos() * phi.cos(), 0.0)).norm() < 1e-13);
        }
    }

    #[test]
    fn lambda_matches_direct_pairing() {
        let f = torus_frame("0.2*sin(x)", "cos(y)", "0.5*sin(x)", 16);
        let lambda = f.lambda();
        let vl = f.v_lambda();
        for (idx, x, y) in f.grid.points() {
            for phi in [0.0f64, 1.1, 2.5, 4.0] {
                let rho = 0.2 * x.sin();
                let (e1, e2) = (y.cos(), 0.5 * x.sin());
                let g = (2.0 * rho).exp();
                let v = ((-rho).exp() * phi.cos(), (-rho).exp() * phi.sin());
                let iv = (-v.1, v.0);
                let direct = g * (e1 * iv.0 + e2 * iv.1);
                assert!((lambda.eval_at_node(idx, phi).re - direct).abs() < 1e-12);
                let ev = g * (e1 * v.0 + e2 * v.1);
                assert!((vl.eval_at_node(idx, phi).re + ev).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mu_sum_is_generator() {
        let f = torus_frame("0.2*sin(x)*cos(y)", "cos(y)", "0.5*sin(x)", 16);
        let u = PhaseSpec::random(&mut rng(1), f.chart.domain, &[-2, 0, 1, 3], 2, 1.0).sample(&f.grid);
        let sum = f.mu_plus(&u).unwrap().add(&f.mu_minus(&u).unwrap()).unwrap();
        let ge = f.g_e(&u).unwrap();
        assert!(sum.sub(&ge).unwrap().sup_norm() <= 1e-12 * ge.sup_norm());
    }

    #[test]
    fn mu_shifts_one_mode() {
        let f = torus_frame("0.2*sin(x)*cos(y)", "cos(y)", "0.5*sin(x)", 16);
        let u = PhaseSpec::random(&mut rng(2), f.chart.domain, &[2], 2, 1.0).sample(&f.grid);
        assert_eq!(f.mu_plus(&u).unwrap().support(0.0), vec![3]);
        assert_eq!(f.mu_minus(&u).unwrap().support(0.0), vec![1]);
    }

    #[test]
    fn mu_plus_coordinate_flat_example() {
        let f = torus_frame("0", "0", "0", 16);
        // h = sin(x): ∂h = cos(x)/2
        let h: Vec<C> = f.grid.points().map(|(_, x, _)| C::new(x.sin(), 0.0)).collect();
        let out = f.mu_plus_coordinate(0, &h).unwrap();
        for (idx, x, _) in f.grid.points() {
            assert!((out.mode(1).unwrap()[idx] - C::new(0.5 * x.cos(), 0.0)).norm() < 1e-13);
        }
    }

    #[test]
    fn inner_product_examples() {
        let f = torus_frame("0.1*cos(x)", "0", "0", 16);
        let one = PhaseFunction::constant(f.grid.clone(), C::new(1.0, 0.0));
        let area = f.chart.area().unwrap();
        assert!((f.inner_product(&one, &one).unwrap().re - 2.0 * PI * area).abs() < 1e-10);
        let h = vec![C::new(1.0, 0.0); f.grid.len()];
        let a = PhaseFunction::from_mode(f.grid.clone(), 1, h.clone()).unwrap();
        let b = PhaseFunction::from_mode(f.grid.clone(), 2, h).unwrap();
        assert!(f.inner_product(&a, &b).unwrap().norm() < 1e-12);
    }

    #[test]
    fn h1_norm_examples() {
        let f = torus_frame("0", "0", "0", 8);
        let one = PhaseFunction::constant(f.grid.clone(), C::new(1.0, 0.0));
        assert!((f.h1_norm_sq(&one).unwrap() - f.norm_sq(&one).unwrap()).abs() < 1e-12);
        let h = vec![C::new(1.0, 0.0); f.grid.len()];
        let e = PhaseFunction::from_mode(f.grid.clone(), 1, h).unwrap();
        let n = f.norm_sq(&e).unwrap();
        // G_E e^{iφ} = 0 here, X⊥e^{iφ} = 0, so ‖e‖²_{H¹} = ‖Vu‖² + ‖u‖²
        assert!((f.h1_norm_sq(&e).unwrap() - 2.0 * n).abs() < 1e-10);
    }

    #[test]
    fn pestov_in_mode_zero_is_trivial() {
        let f = torus_frame("0.1*sin(x+y)", "0", "0", 16);
        let h: Vec<f64> = f.grid.points().map(|(_, x, y)| (x - 2.0 * y).cos()).collect();
        let u = PhaseFunction::from_base(f.grid.clone(), &h);
        let r = identity_report(Identity::PestovClosed, &f, &u, None, 1e-10).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.rhs.abs() < 1e-10);
        assert!(r.pass);
    }

    #[test]
    fn gk_flat_mode_one() {
        let f = torus_frame("0", "0", "0", 16);
        let h: Vec<C> = f.grid.points().map(|(_, x, _)| C::new(x.cos(), 0.0)).collect();
        let u = PhaseFunction::from_mode(f.grid.clone(), 1, h).unwrap();
        let r = identity_report(Identity::GkIdentity, &f, &u, None, 1e-8).unwrap();
        assert!(r.abs_residual < 1e-8, "{r:?}");
    }

    #[test]
    fn hypothesis_violations_are_rejected() {
        let f = torus_frame("0", "0", "0", 8);
        let two = PhaseSpec::random(&mut rng(0), f.chart.domain, &[1, 2], 1, 1.0).sample(&f.grid);
        assert!(matches!(identity_report(Identity::GkIdentity, &f, &two, None, 1e-6), Err(PhaseError::Hypothesis(_))));
        assert!(matches!(
            identity_report(Identity::PestovBoundary, &f, &two, None, 1e-6),
            Err(PhaseError::Hypothesis(_))
        ));
        assert!(matches!(
            identity_report(Identity::LadderExpansions, &f, &two, None, 1e-6),
            Err(PhaseError::Hypothesis(_))
        ));
    }

    #[test]
    fn disk_stencil_check() {
        let chart = IsothermalChart::new(Domain::Disk { radius: 1.0 }, parse("0").unwrap(), 33, 33).unwrap();
        let f = ThermostatFrame::new(&chart, &ExternalField::zero()).unwrap();
        let h: Vec<f64> = f.grid.points().map(|(_, x, _)| x).collect();
        let u = PhaseFunction::from_base(f.grid.clone(), &h);
        assert!(matches!(f.x(&u), Err(PhaseError::StencilOutOfDomain { .. })));
        assert!(matches!(
            identity_report(Identity::PestovBoundary, &f, &u, None, 1e-6),
            Err(PhaseError::Hypothesis(_))
        ));
    }

    #[test]
    fn csv_summary() {
        let r = ResidualRecord::scalar("x", 1.0, 1.0, 2.0, 1e-6);
        let mut buf = Vec::new();
        write_records_csv(&[r], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "name,rel_residual,pass\nx,0e0,true\n");
    }
}
