//! Surface geometry in isothermal coordinates `g = e^{2ρ}(dx² + dy²)`.
//!
//! All derivatives of `ρ` and of the external field are symbolic; the only
//! discrete step here is the periodic Poisson solve in
//! [`conformal_normalize`].

use std::f64::consts::PI;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::exprfield::{Differentiated, EvalError, Expr, FieldExpr, Var};
use crate::grid::{Domain, Grid2, ScalarField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurfaceError {
    #[error("expression evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("{what} is not periodic on the torus (mismatch {mismatch:e})")]
    NotPeriodic { what: &'static str, mismatch: f64 },
    #[error("operation requires a closed (torus) domain")]
    NotClosed,
    #[error("operation requires a disk domain")]
    NotDisk,
    #[error("Poisson solve residual {residual:e} above tolerance {tolerance:e}")]
    PoissonResidual { residual: f64, tolerance: f64 },
    #[error("invalid chart: {0}")]
    Invalid(String),
}

/// Periodicity tolerance for boundary-identified node pairs on a torus.
pub const PERIODICITY_TOL: f64 = 1e-12;

/// Conformal factor and its derivatives at a point.
#[derive(Debug, Clone, Copy)]
pub struct ChartPoint {
    pub rho: f64,
    pub rho_x: f64,
    pub rho_y: f64,
}

/// Chart domain plus conformal factor `ρ`, sampled on an `nx × ny` grid.
#[derive(Debug, Clone)]
pub struct IsothermalChart {
    pub domain: Domain,
    pub rho: Differentiated,
    pub grid: Arc<Grid2>,
}

fn check_periodic(expr: &Expr, length: f64, n: usize, what: &'static str) -> Result<(), SurfaceError> {
    let mut mismatch: f64 = 0.0;
    for i in 0..n {
        let s = i as f64 * length / n as f64;
        mismatch = mismatch.max((expr.eval(0.0, s)? - expr.eval(length, s)?).abs());
        mismatch = mismatch.max((expr.eval(s, 0.0)? - expr.eval(s, length)?).abs());
    }
    if mismatch > PERIODICITY_TOL {
        return Err(SurfaceError::NotPeriodic { what, mismatch });
    }
    Ok(())
}

impl IsothermalChart {
    pub fn new(domain: Domain, rho: FieldExpr, nx: usize, ny: usize) -> Result<Self, SurfaceError> {
        match domain {
            Domain::Torus { length } if length > 0.0 => check_periodic(&rho, length, nx.max(ny), "rho")?,
            Domain::Disk { radius } if radius > 0.0 => {}
            _ => return Err(SurfaceError::Invalid("domain size must be positive".into())),
        }
        if nx < 4 || ny < 4 {
            return Err(SurfaceError::Invalid("grid resolution must be at least 4".into()));
        }
        let chart = IsothermalChart { domain, rho: Differentiated::new(rho), grid: Grid2::new(domain, nx, ny) };
        // ρ must be finite everywhere on the grid.
        for (idx, x, y) in chart.grid.points() {
            if chart.grid.mask[idx] {
                chart.rho.value.eval(x, y)?;
            }
        }
        Ok(chart)
    }

    /// Same conformal factor on a different domain (used for enlarged disks).
    pub fn with_domain(&self, domain: Domain) -> Result<Self, SurfaceError> {
        IsothermalChart::new(domain, self.rho.value.clone(), self.grid.nx, self.grid.ny)
    }

    pub fn with_resolution(&self, nx: usize, ny: usize) -> Result<Self, SurfaceError> {
        IsothermalChart::new(self.domain, self.rho.value.clone(), nx, ny)
    }

    /// The chart of `e^{2σ} g`.
    pub fn conformally_rescaled(&self, sigma: &FieldExpr) -> Result<Self, SurfaceError> {
        IsothermalChart::new(self.domain, self.rho.value.add(sigma), self.grid.nx, self.grid.ny)
    }

    pub fn radius(&self) -> Option<f64> {
        match self.domain {
            Domain::Disk { radius } => Some(radius),
            Domain::Torus { .. } => None,
        }
    }

    #[inline]
    pub fn at(&self, x: f64, y: f64) -> Result<ChartPoint, EvalError> {
        Ok(ChartPoint {
            rho: self.rho.value.eval(x, y)?,
            rho_x: self.rho.dx.eval(x, y)?,
            rho_y: self.rho.dy.eval(x, y)?,
        })
    }

    /// `K = -e^{-2ρ}(ρ_xx + ρ_yy)`.
    pub fn curvature_at(&self, x: f64, y: f64) -> Result<f64, EvalError> {
        let rho = self.rho.value.eval(x, y)?;
        let lap = self.rho.dxx.eval(x, y)? + self.rho.dyy.eval(x, y)?;
        Ok(-(-2.0 * rho).exp() * lap)
    }

    /// `Δ_g f = e^{-2ρ}(f_xx + f_yy)` for a closed-form `f`.
    pub fn laplace_beltrami_at(&self, f: &Differentiated, x: f64, y: f64) -> Result<f64, EvalError> {
        let rho = self.rho.value.eval(x, y)?;
        Ok((-2.0 * rho).exp() * (f.dxx.eval(x, y)? + f.dyy.eval(x, y)?))
    }

    /// `e^{2ρ}` on the grid (area density).
    pub fn area_density(&self) -> Result<ScalarField, SurfaceError> {
        Ok(ScalarField::try_from_fn(&self.grid, |x, y| self.rho.value.eval(x, y).map(|r| (2.0 * r).exp()))?)
    }

    /// Riemannian area of the chart domain by grid quadrature.
    pub fn area(&self) -> Result<f64, SurfaceError> {
        match self.domain {
            Domain::Torus { .. } => Ok(self.area_density()?.integrate()),
            Domain::Disk { radius } => {
                polar_integral(radius, |x, y| self.rho.value.eval(x, y).map(|r| (2.0 * r).exp()))
            }
        }
    }

    /// Conformal factor `e^{ρ}` sampled over the grid; used to bound metric
    /// lengths.
    pub fn max_conformal_factor(&self) -> Result<f64, SurfaceError> {
        let mut best: f64 = 0.0;
        for (idx, x, y) in self.grid.points() {
            if self.grid.mask[idx] {
                best = best.max(self.rho.value.eval(x, y)?.exp());
            }
        }
        if let Domain::Disk { radius } = self.domain {
            for i in 0..256 {
                let t = 2.0 * PI * i as f64 / 256.0;
                best = best.max(self.rho.value.eval(radius * t.cos(), radius * t.sin())?.exp());
            }
        }
        Ok(best)
    }
}

/// Field components and their first partial derivatives at a point.
#[derive(Debug, Clone, Copy, Default)]
pub struct FieldPoint {
    pub e1: f64,
    pub e2: f64,
    pub e1_x: f64,
    pub e1_y: f64,
    pub e2_x: f64,
    pub e2_y: f64,
}

/// Coordinate components `(E¹, E²)` of the external field.
#[derive(Debug, Clone)]
pub struct ExternalField {
    pub e1: FieldExpr,
    pub e2: FieldExpr,
    pub e1_x: FieldExpr,
    pub e1_y: FieldExpr,
    pub e2_x: FieldExpr,
    pub e2_y: FieldExpr,
}

impl ExternalField {
    pub fn new(e1: FieldExpr, e2: FieldExpr) -> Self {
        ExternalField {
            e1_x: e1.differentiate(Var::X),
            e1_y: e1.differentiate(Var::Y),
            e2_x: e2.differentiate(Var::X),
            e2_y: e2.differentiate(Var::Y),
            e1,
            e2,
        }
    }

    pub fn zero() -> Self {
        ExternalField::new(Expr::zero(), Expr::zero())
    }

    /// `E = -e^{-2ρ}∇ρ`, for which `div E = K` and `𝕂 ≡ 0`.
    pub fn curvature_cancelling(rho: &FieldExpr) -> Self {
        let w = rho.scale(-2.0).exp();
        ExternalField::new(rho.differentiate(Var::X).mul(&w).neg(), rho.differentiate(Var::Y).mul(&w).neg())
    }

    pub fn is_zero(&self) -> bool {
        self.e1.is_zero() && self.e2.is_zero()
    }

    /// Validates the field against a chart (periodicity on a torus,
    /// evaluability on the grid).
    pub fn validate(&self, chart: &IsothermalChart) -> Result<(), SurfaceError> {
        if let Domain::Torus { length } = chart.domain {
            let n = chart.grid.nx.max(chart.grid.ny);
            check_periodic(&self.e1, length, n, "E1")?;
            check_periodic(&self.e2, length, n, "E2")?;
        }
        for (idx, x, y) in chart.grid.points() {
            if chart.grid.mask[idx] {
                self.at(x, y)?;
            }
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, x: f64, y: f64) -> Result<FieldPoint, EvalError> {
        if self.is_zero() {
            return Ok(FieldPoint::default());
        }
        Ok(FieldPoint {
            e1: self.e1.eval(x, y)?,
            e2: self.e2.eval(x, y)?,
            e1_x: self.e1_x.eval(x, y)?,
            e1_y: self.e1_y.eval(x, y)?,
            e2_x: self.e2_x.eval(x, y)?,
            e2_y: self.e2_y.eval(x, y)?,
        })
    }

    /// `(e^{2σ} g, e^{-2σ} E)` partner field.
    pub fn conformally_rescaled(&self, sigma: &FieldExpr) -> Self {
        let factor = sigma.scale(-2.0).exp();
        ExternalField::new(factor.mul(&self.e1), factor.mul(&self.e2))
    }
}

/// `div_g E = E¹_x + E²_y + 2(ρ_x E¹ + ρ_y E²)`.
pub fn divergence_at(chart: &IsothermalChart, field: &ExternalField, x: f64, y: f64) -> Result<f64, EvalError> {
    let p = chart.at(x, y)?;
    let e = field.at(x, y)?;
    Ok(e.e1_x + e.e2_y + 2.0 * (p.rho_x * e.e1 + p.rho_y * e.e2))
}

/// `𝕂 = K - div_g E`.
pub fn thermostat_curvature_at(
    chart: &IsothermalChart,
    field: &ExternalField,
    x: f64,
    y: f64,
) -> Result<f64, EvalError> {
    Ok(chart.curvature_at(x, y)? - divergence_at(chart, field, x, y)?)
}

pub fn gaussian_curvature(chart: &IsothermalChart) -> Result<ScalarField, SurfaceError> {
    Ok(ScalarField::try_from_fn(&chart.grid, |x, y| chart.curvature_at(x, y))?)
}

pub fn divergence(chart: &IsothermalChart, field: &ExternalField) -> Result<ScalarField, SurfaceError> {
    Ok(ScalarField::try_from_fn(&chart.grid, |x, y| divergence_at(chart, field, x, y))?)
}

pub fn thermostat_curvature(chart: &IsothermalChart, field: &ExternalField) -> Result<ScalarField, SurfaceError> {
    Ok(ScalarField::try_from_fn(&chart.grid, |x, y| thermostat_curvature_at(chart, field, x, y))?)
}

/// Output of [`conformal_normalize`].
#[derive(Debug, Clone)]
pub struct ConformalNormalization {
    /// Zero-mean conformal exponent on the grid.
    pub sigma: ScalarField,
    /// Constant `c = ∫(K - div_g E) dVol_g / Vol_g(M)`.
    pub c: f64,
    /// Relative residual of the discrete Poisson solve.
    pub poisson_residual: f64,
    /// Thermostat curvature of `(e^{2σ} g, e^{-2σ} E)` on the grid.
    pub new_curvature: ScalarField,
    /// `sup |𝕂̃ - e^{-2σ} c|`.
    pub curvature_residual: f64,
}

/// Relative tolerance of the periodic Poisson solve.
pub const POISSON_TOL: f64 = 1e-10;

/// Finds `σ` with `K - Δ_g σ - div_g E = c` on a torus, so the rescaled
/// thermostat has curvature `e^{-2σ} c`.
pub fn conformal_normalize(
    chart: &IsothermalChart,
    field: &ExternalField,
) -> Result<ConformalNormalization, SurfaceError> {
    if !chart.domain.is_closed() {
        return Err(SurfaceError::NotClosed);
    }
    let grid = &chart.grid;
    let kt = thermostat_curvature(chart, field)?;
    let density = chart.area_density()?;
    let c = kt.integrate_weighted(&density.values) / density.integrate();
    // Δσ = e^{2ρ}(K - div E - c) in flat terms
    let rhs: Vec<f64> = kt.values.iter().zip(&density.values).map(|(k, d)| d * (k - c)).collect();
    let sigma = grid.solve_poisson(&rhs);
    let lap = grid.laplacian(&sigma);
    let scale = rhs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let abs_res = lap.iter().zip(&rhs).fold(0.0f64, |a, (l, r)| a.max((l - r).abs()));
    let poisson_residual = if scale > 0.0 { abs_res / scale } else { abs_res };
    if poisson_residual > POISSON_TOL {
        return Err(SurfaceError::PoissonResidual { residual: poisson_residual, tolerance: POISSON_TOL });
    }
    let mut new_curv = Vec::with_capacity(grid.len());
    let mut curvature_residual: f64 = 0.0;
    for idx in 0..grid.len() {
        let e2r = density.values[idx];
        let s = sigma[idx];
        let value = (-2.0 * s).exp() * (kt.values[idx] - lap[idx] / e2r);
        curvature_residual = curvature_residual.max((value - (-2.0 * s).exp() * c).abs());
        new_curv.push(value);
    }
    Ok(ConformalNormalization {
        sigma: ScalarField { grid: grid.clone(), values: sigma },
        c,
        poisson_residual,
        new_curvature: ScalarField { grid: grid.clone(), values: new_curv },
        curvature_residual,
    })
}

/// Pointwise residuals of the conformal transformation laws under
/// `(g, E) ↦ (e^{2σ} g, e^{-2σ} E)`, divided by `max(1, sup of the terms)`.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct ConformalLawResiduals {
    pub curvature: f64,
    pub divergence: f64,
    pub thermostat_curvature: f64,
}

/// Compares curvature, divergence and `𝕂` of the rescaled pair (computed
/// from scratch) with the transformation laws
/// `K̃ = e^{-2σ}(K - Δ_g σ)`, `div_g̃ Ẽ = e^{-2σ} div_g E` and
/// `𝕂̃ = e^{-2σ}(𝕂 - Δ_g σ)` on the grid.
pub fn conformal_law_residuals(
    chart: &IsothermalChart,
    field: &ExternalField,
    sigma: &FieldExpr,
) -> Result<ConformalLawResiduals, SurfaceError> {
    let new_chart = chart.conformally_rescaled(sigma)?;
    let new_field = field.conformally_rescaled(sigma);
    let s = Differentiated::new(sigma.clone());
    let (mut dk, mut sk, mut dd, mut sd, mut dt, mut st) = (0f64, 0f64, 0f64, 0f64, 0f64, 0f64);
    for (idx, x, y) in chart.grid.points() {
        if !chart.grid.mask[idx] {
            continue;
        }
        let f = (-2.0 * s.value.eval(x, y)?).exp();
        let lap = chart.laplace_beltrami_at(&s, x, y)?;
        let k = chart.curvature_at(x, y)?;
        let div = divergence_at(chart, field, x, y)?;
        let k_new = new_chart.curvature_at(x, y)?;
        let div_new = divergence_at(&new_chart, &new_field, x, y)?;
        let k_law = f * (k - lap);
        let div_law = f * div;
        dk = dk.max((k_new - k_law).abs());
        sk = sk.max(k_new.abs()).max(k_law.abs());
        dd = dd.max((div_new - div_law).abs());
        sd = sd.max(div_new.abs()).max(div_law.abs());
        dt = dt.max(((k_new - div_new) - (k_law - div_law)).abs());
        st = st.max((k_new - div_new).abs()).max((k_law - div_law).abs());
    }
    let rel = |d: f64, s: f64| d / s.max(1.0);
    Ok(ConformalLawResiduals { curvature: rel(dk, sk), divergence: rel(dd, sd), thermostat_curvature: rel(dt, st) })
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 {
                1.0
            } else if n == 1 {
                z
            } else {
                p1
            };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * p - pm1) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `∫_{|p| ≤ R} f dx dy` by Gauss–Legendre in `r` and the periodic
/// trapezoid rule in the polar angle.
pub fn polar_integral<E>(radius: f64, mut f: impl FnMut(f64, f64) -> Result<f64, E>) -> Result<f64, SurfaceError>
where
    SurfaceError: From<E>,
{
    const RADIAL: usize = 64;
    const ANGULAR: usize = 256;
    let (nodes, weights) = gauss_legendre(RADIAL);
    let mut total = 0.0;
    for (z, w) in nodes.iter().zip(&weights) {
        let r = 0.5 * radius * (z + 1.0);
        let mut ring = 0.0;
        for a in 0..ANGULAR {
            let t = 2.0 * PI * a as f64 / ANGULAR as f64;
            ring += f(r * t.cos(), r * t.sin())?;
        }
        total += w * 0.5 * radius * r * ring * 2.0 * PI / ANGULAR as f64;
    }
    Ok(total)
}

/// `∫ K dVol_g` over the chart domain (no boundary term on a disk).
pub fn gauss_bonnet(chart: &IsothermalChart) -> Result<f64, SurfaceError> {
    let integrand = |x: f64, y: f64| -> Result<f64, EvalError> {
        let rho = chart.rho.value.eval(x, y)?;
        Ok(chart.curvature_at(x, y)? * (2.0 * rho).exp())
    };
    match chart.domain {
        Domain::Torus { .. } => {
            let f = ScalarField::try_from_fn(&chart.grid, integrand)?;
            Ok(f.integrate())
        }
        Domain::Disk { radius } => polar_integral(radius, integrand),
    }
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct ConvexityReport {
    /// `min Λ(x,v) - ⟨E - ⟨E,v⟩v, ν⟩` over the sampled unit tangents of `∂M`.
    pub margin: f64,
    /// Boundary polar angle where the minimum is attained.
    pub argmin_angle: f64,
    pub samples: usize,
}

/// Default number of boundary samples for the convexity certificate.
pub const CONVEXITY_SAMPLES: usize = 512;

/// Strict thermostat convexity margin of the boundary circle `|p| = R`.
///
/// The boundary curvature uses the conformal law
/// `k_g = e^{-ρ}(1/R + ∂_r ρ)` for a coordinate circle. On a surface the
/// unit tangents at a boundary point are `±T`; both are sampled.
pub fn boundary_convexity(
    chart: &IsothermalChart,
    field: &ExternalField,
    samples: usize,
) -> Result<ConvexityReport, SurfaceError> {
    let radius = chart.radius().ok_or(SurfaceError::NotDisk)?;
    let mut margin = f64::INFINITY;
    let mut argmin_angle = 0.0;
    for s in 0..samples {
        let psi = 2.0 * PI * s as f64 / samples as f64;
        let (c, sn) = (psi.cos(), psi.sin());
        let (x, y) = (radius * c, radius * sn);
        let p = chart.at(x, y)?;
        let e = field.at(x, y)?;
        let geodesic_curvature = (-p.rho).exp() * (1.0 / radius + p.rho_x * c + p.rho_y * sn);
        let g = (2.0 * p.rho).exp();
        let inv = (-p.rho).exp();
        let nu = (-inv * c, -inv * sn);
        for sign in [1.0, -1.0] {
            let v = (-sign * inv * sn, sign * inv * c);
            let e_dot_v = g * (e.e1 * v.0 + e.e2 * v.1);
            let normal_part = (e.e1 - e_dot_v * v.0, e.e2 - e_dot_v * v.1);
            let pushed = g * (normal_part.0 * nu.0 + normal_part.1 * nu.1);
            let m = geodesic_curvature - pushed;
            if m < margin {
                margin = m;
                argmin_angle = psi;
            }
        }
    }
    Ok(ConvexityReport { margin, argmin_angle, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprfield::parse;

    fn disk(rho: &str) -> IsothermalChart {
        IsothermalChart::new(Domain::Disk { radius: 1.0 }, parse(rho).unwrap(), 33, 33).unwrap()
    }

    fn torus(rho: &str, n: usize) -> IsothermalChart {
        IsothermalChart::new(Domain::Torus { length: 2.0 * PI }, parse(rho).unwrap(), n, n).unwrap()
    }

    fn field(e1: &str, e2: &str) -> ExternalField {
        ExternalField::new(parse(e1).unwrap(), parse(e2).unwrap())
    }

    const SPHERE: &str = "log(2/(1+x^2+y^2))";

    #[test]
    fn flat_and_spherical_curvature() {
        assert_eq!(gaussian_curvature(&disk("0")).unwrap().sup_norm(), 0.0);
        let k = gaussian_curvature(&disk(SPHERE)).unwrap();
        assert!(k.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn divergence_examples() {
        let chart = disk("0");
        let d = divergence(&chart, &field("x", "y")).unwrap();
        assert!(d.values.iter().all(|v| (v - 2.0).abs() < 1e-15));
        assert_eq!(divergence(&chart, &field("-y", "x")).unwrap().sup_norm(), 0.0);
        let kt = thermostat_curvature(&chart, &field("x", "y")).unwrap();
        assert!(kt.values.iter().all(|v| (v + 2.0).abs() < 1e-15));
        assert_eq!(thermostat_curvature(&chart, &ExternalField::zero()).unwrap().sup_norm(), 0.0);
        let kt = thermostat_curvature(&disk(SPHERE), &ExternalField::zero()).unwrap();
        assert!(kt.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn periodicity_is_enforced() {
        let bad = IsothermalChart::new(Domain::Torus { length: 2.0 * PI }, parse("x").unwrap(), 16, 16);
        assert!(matches!(bad, Err(SurfaceError::NotPeriodic { .. })));
        let chart = torus("0.1*sin(x)", 16);
        assert!(field("y", "0").validate(&chart).is_err());
        assert!(field("cos(y)", "sin(x+y)").validate(&chart).is_ok());
    }

    #[test]
    fn normalization_of_constant_curvature_is_trivial() {
        let chart = torus("0", 16);
        let n = conformal_normalize(&chart, &ExternalField::zero()).unwrap();
        assert!(n.sigma.sup_norm() < 1e-14);
        assert!(n.c.abs() < 1e-14);
    }

    #[test]
    fn normalization_of_gradient_field() {
        // E = ∇f with f = sin(x)cos(2y): σ = -f up to a constant.
        let chart = torus("0", 32);
        let e = field("cos(x)*cos(2*y)", "-2*sin(x)*sin(2*y)");
        let n = conformal_normalize(&chart, &e).unwrap();
        assert!(n.c.abs() < 1e-12);
        for (idx, x, y) in chart.grid.points() {
            assert!((n.sigma.values[idx] + x.sin() * (2.0 * y).cos()).abs() < 1e-12);
        }
        assert!(n.curvature_residual < 1e-10);
        assert!(n.new_curvature.sup_norm() < 1e-10);
    }

    #[test]
    fn normalization_requires_closed_domain() {
        assert!(matches!(conformal_normalize(&disk("0"), &ExternalField::zero()), Err(SurfaceError::NotClosed)));
    }

    #[test]
    fn gauss_bonnet_values() {
        let t = torus("0.3*sin(x)*cos(y) + 0.2*cos(2*x)", 32);
        assert!(gauss_bonnet(&t).unwrap().abs() < 1e-8);
        assert!(gauss_bonnet(&disk("0")).unwrap().abs() < 1e-14);
        assert!((gauss_bonnet(&disk(SPHERE)).unwrap() - 2.0 * PI).abs() < 1e-6);
    }

    #[test]
    fn legendre_rule_integrates_polynomials() {
        let (z, w) = gauss_legendre(8);
        let integral: f64 = z.iter().zip(&w).map(|(z, w)| w * z.powi(14)).sum();
        assert!((integral - 2.0 / 15.0).abs() < 1e-14);
    }

    #[test]
    fn convexity_margins() {
        let flat = disk("0");
        let m = boundary_convexity(&flat, &ExternalField::zero(), CONVEXITY_SAMPLES).unwrap();
        assert!((m.margin - 1.0).abs() < 1e-14);
        let m = boundary_convexity(&flat, &field("0.3", "0"), CONVEXITY_SAMPLES).unwrap();
        assert!((m.margin - 0.7).abs() < 1e-12);
        let m = boundary_convexity(&flat, &field("2", "0"), CONVEXITY_SAMPLES).unwrap();
        assert!(m.margin < 0.0);
        let m = boundary_convexity(&disk(SPHERE), &ExternalField::zero(), CONVEXITY_SAMPLES).unwrap();
        assert!(m.margin.abs() < 1e-12);
    }

    #[test]
    fn dense_sampling_oracle_for_tilted_field() {
        // Brute force over boundary angle and both tangent orientations.
        let flat = disk("0");
        let (a, b) = (0.2, -0.15);
        let e = field(&a.to_string(), &b.to_string());
        let mut best = f64::INFINITY;
        for s in 0..20000 {
            let t = 2.0 * PI * s as f64 / 20000.0;
            // Λ = 1, E normal component along inward normal −(cos t, sin t)
            let en = -(a * t.cos() + b * t.sin());
            best = best.min(1.0 - en);
        }
        let m = boundary_convexity(&flat, &e, CONVEXITY_SAMPLES).unwrap();
        assert!((m.margin - best).abs() < 1e-4);
        assert!((best - (1.0 - (a * a + b * b).sqrt())).abs() < 1e-6);
    }
}
