//! Seeded generators for test inputs: random trig-polynomial fields and
//! bandlimited phase functions.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::exprfield::{Expr, FieldExpr};
use crate::grid::{Domain, Grid2};
use crate::phase::PhaseFunction;

/// Name recorded in reports for the generator below.
pub const GENERATOR_NAME: &str = "chacha8";

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Real trig polynomial of degree `≤ degree` in each variable with period
/// `period`, scaled so that its sup-norm is at most `amplitude`.
pub fn random_trig_expr(rng: &mut impl Rng, degree: u32, amplitude: f64, period: f64) -> FieldExpr {
    let w = 2.0 * PI / period;
    let d = degree as i32;
    let mut terms = Vec::new();
    for p in 0..=d {
        for q in -d..=d {
            if p == 0 && q <= 0 {
                continue;
            }
            terms.push((p, q, rng.gen_range(-1.0f64..1.0), rng.gen_range(-1.0f64..1.0)));
        }
    }
    let total: f64 = terms.iter().map(|t| t.2.abs() + t.3.abs()).sum();
    let scale = if total > 0.0 { amplitude / total } else { 0.0 };
    let mut expr = Expr::zero();
    for (p, q, a, b) in terms {
        let arg = Expr::x().scale(w * p as f64).add(&Expr::y().scale(w * q as f64));
        expr = expr.add(&arg.cos().scale(a * scale)).add(&arg.sin().scale(b * scale));
    }
    expr
}

/// Closed-form description of a bandlimited phase function, so the same
/// function can be sampled at several grid resolutions.
#[derive(Debug, Clone, Serialize)]
pub struct PhaseSpec {
    /// `(k, p, q, re, im)`: contributes `c · b_{pq}(x, y) · e^{ikφ}`.
    pub terms: Vec<(i32, i32, i32, f64, f64)>,
    /// Torus period, or disk radius for disk specs.
    pub scale: f64,
    pub disk: bool,
}

/// Support radius of disk test functions, as a fraction of the disk radius.
pub const DISK_SUPPORT_FRACTION: f64 = 0.8;

impl PhaseSpec {
    /// Random spec with vertical modes `k ∈ ks` and spatial degree
    /// `≤ degree`. On a torus the spatial basis is `e^{i(px+qy)·2π/L}`; on a
    /// disk it is `x^p y^q` times a smooth bump supported in
    /// `r ≤ 0.8R`.
    pub fn random(rng: &mut impl Rng, domain: Domain, ks: &[i32], degree: u32, amplitude: f64) -> Self {
        let d = degree as i32;
        let mut terms = Vec::new();
        let disk = matches!(domain, Domain::Disk { .. });
        for &k in ks {
            for p in if disk { 0..=d } else { -d..=d } {
                for q in if disk { 0..=d } else { -d..=d } {
                    if disk && p + q > d {
                        continue;
                    }
                    let re = rng.gen_range(-1.0..1.0) * amplitude;
                    let im = rng.gen_range(-1.0..1.0) * amplitude;
                    terms.push((k, p, q, re, im));
                }
            }
        }
        let scale = match domain {
            Domain::Torus { length } => length,
            Domain::Disk { radius } => radius,
        };
        PhaseSpec { terms, scale, disk }
    }

    /// Restricts to real-valued functions by adding the conjugate-mirror
    /// terms.
    pub fn realified(&self) -> Self {
        let mut terms = Vec::with_capacity(self.terms.len() * 2);
        for &(k, p, q, re, im) in &self.terms {
            terms.push((k, p, q, 0.5 * re, 0.5 * im));
            if self.disk {
                terms.push((-k, p, q, 0.5 * re, -0.5 * im));
            } else {
                terms.push((-k, -p, -q, 0.5 * re, -0.5 * im));
            }
        }
        PhaseSpec { terms, scale: self.scale, disk: self.disk }
    }

    pub fn kmax(&self) -> usize {
        self.terms.iter().map(|t| t.0.unsigned_abs() as usize).max().unwrap_or(0)
    }

    fn basis(&self, p: i32, q: i32, x: f64, y: f64) -> Complex64 {
        if self.disk {
            let r0 = DISK_SUPPORT_FRACTION * self.scale;
            let s = 1.0 - (x * x + y * y) / (r0 * r0);
            if s <= 0.0 {
                return Complex64::new(0.0, 0.0);
            }
            Complex64::new(s.powi(6) * x.powi(p) * y.powi(q), 0.0)
        } else {
            let w = 2.0 * PI / self.scale;
            Complex64::from_polar(1.0, w * (p as f64 * x + q as f64 * y))
        }
    }

    pub fn sample(&self, grid: &std::sync::Arc<Grid2>) -> PhaseFunction {
        let kmax = self.kmax();
        let mut modes = vec![vec![Complex64::new(0.0, 0.0); grid.len()]; 2 * kmax + 1];
        for (idx, x, y) in grid.points() {
            if !grid.mask[idx] {
                continue;
            }
            for &(k, p, q, re, im) in &self.terms {
                modes[(k + kmax as i32) as usize][idx] += Complex64::new(re, im) * self.basis(p, q, x, y);
            }
        }
        PhaseFunction::from_modes(grid.clone(), kmax, modes).expect("consistent mode layout")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trig_expr_is_bounded_and_periodic() {
        let mut r = rng(7);
        let e = random_trig_expr(&mut r, 3, 0.3, 2.0 * PI);
        for i in 0..50 {
            let t = i as f64 * 0.37;
            let v = e.eval(t, 1.0 - t).unwrap();
            assert!(v.abs() <= 0.3 + 1e-12);
            assert!((v - e.eval(t + 2.0 * PI, 1.0 - t).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn seeds_are_reproducible() {
        let a = random_trig_expr(&mut rng(3), 2, 1.0, 1.0).to_string();
        let b = random_trig_expr(&mut rng(3), 2, 1.0, 1.0).to_string();
        assert_eq!(a, b);
    }
}
