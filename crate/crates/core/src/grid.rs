//! Planar sampling grids, grid fields and the discrete derivative operators
//! used on them.
//!
//! Torus grids are periodic with nodes `x_i = i L / n` and use FFT
//! differentiation. Disk grids cover the bounding square `[-R, R]^2`
//! (endpoints included) with an inside mask and use fourth-order central
//! differences with zero padding; data on a disk grid is expected to be
//! supported well inside the disk.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Domain {
    /// Periodic square `[0, L)^2`.
    Torus { length: f64 },
    /// Closed disk `x^2 + y^2 <= R^2`.
    Disk { radius: f64 },
}

impl Domain {
    pub fn is_closed(&self) -> bool {
        matches!(self, Domain::Torus { .. })
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Domain::Torus { .. } => true,
            Domain::Disk { radius } => x * x + y * y <= radius * radius,
        }
    }
}

struct FftPlans {
    fwd_x: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
}

/// Node layout of a planar grid. Shared behind an `Arc` by every field
/// sampled on it.
pub struct Grid2 {
    pub domain: Domain,
    pub nx: usize,
    pub ny: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub dx: f64,
    pub dy: f64,
    /// Inside-domain flag per node (all true on a torus).
    pub mask: Vec<bool>,
    fft: Option<FftPlans>,
    kx: Vec<f64>,
    ky: Vec<f64>,
}

impl fmt::Debug for Grid2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid2").field("domain", &self.domain).field("nx", &self.nx).field("ny", &self.ny).finish()
    }
}

fn wavenumbers(n: usize, length: f64) -> Vec<f64> {
    let base = 2.0 * std::f64::consts::PI / length;
    (0..n)
        .map(|i| {
            if n.is_multiple_of(2) && i == n / 2 {
                0.0
            } else if i <= n / 2 {
                base * i as f64
            } else {
                base * (i as f64 - n as f64)
            }
        })
        .collect()
}

fn squared_wavenumbers(n: usize, length: f64) -> Vec<f64> {
    let base = 2.0 * std::f64::consts::PI / length;
    (0..n)
        .map(|i| {
            let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
            (base * k).powi(2)
        })
        .collect()
}

impl Grid2 {
    pub fn new(domain: Domain, nx: usize, ny: usize) -> Arc<Grid2> {
        assert!(nx >= 4 && ny >= 4, "grid needs at least 4 nodes per axis");
        match domain {
            Domain::Torus { length } => {
                let dx = length / nx as f64;
                let dy = length / ny as f64;
                let xs = (0..nx).map(|i| i as f64 * dx).collect();
                let ys = (0..ny).map(|j| j as f64 * dy).collect();
                let mut planner = FftPlanner::new();
                let fft = FftPlans {
                    fwd_x: planner.plan_fft_forward(nx),
                    inv_x: planner.plan_fft_inverse(nx),
                    fwd_y: planner.plan_fft_forward(ny),
                    inv_y: planner.plan_fft_inverse(ny),
                };
                Arc::new(Grid2 {
                    domain,
                    nx,
                    ny,
                    xs,
                    ys,
                    dx,
                    dy,
                    mask: vec![true; nx * ny],
                    fft: Some(fft),
                    kx: wavenumbers(nx, length),
                    ky: wavenumbers(ny, length),
                })
            }
            Domain::Disk { radius } => {
                let dx = 2.0 * radius / (nx - 1) as f64;
                let dy = 2.0 * radius / (ny - 1) as f64;
                let xs: Vec<f64> = (0..nx).map(|i| -radius + i as f64 * dx).collect();
                let ys: Vec<f64> = (0..ny).map(|j| -radius + j as f64 * dy).collect();
                let mut mask = Vec::with_capacity(nx * ny);
                for &y in &ys {
                    for &x in &xs {
                        mask.push(domain.contains(x, y));
                    }
                }
                Arc::new(Grid2 { domain, nx, ny, xs, ys, dx, dy, mask, fft: None, kx: Vec::new(), ky: Vec::new() })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Node coordinates in storage order (row-major in `y`).
    pub fn points(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        (0..self.ny).flat_map(move |j| (0..self.nx).map(move |i| (j * self.nx + i, self.xs[i], self.ys[j])))
    }

    /// Quadrature weights for `∫ · dx dy`: periodic trapezoid on a torus,
    /// masked trapezoid on a disk.
    pub fn weights(&self) -> Vec<f64> {
        let cell = self.dx * self.dy;
        match self.domain {
            Domain::Torus { .. } => vec![cell; self.len()],
            Domain::Disk { .. } => self
                .points()
                .map(|(idx, _, _)| {
                    if !self.mask[idx] {
                        return 0.0;
                    }
                    let i = idx % self.nx;
                    let j = idx / self.nx;
                    let wx = if i == 0 || i == self.nx - 1 { 0.5 } else { 1.0 };
                    let wy = if j == 0 || j == self.ny - 1 { 0.5 } else { 1.0 };
                    cell * wx * wy
                })
                .collect(),
        }
    }

    /// Number of nodes from the edge that a fourth-order stencil reaches.
    pub const STENCIL_HALF_WIDTH: usize = 2;

    /// True when a derivative stencil centred at the node stays inside the
    /// domain (always on a torus).
    pub fn stencil_interior(&self, idx: usize) -> bool {
        match self.domain {
            Domain::Torus { .. } => true,
            Domain::Disk { radius } => {
                let x = self.xs[idx % self.nx];
                let y = self.ys[idx / self.nx];
                let reach = Self::STENCIL_HALF_WIDTH as f64 * self.dx.max(self.dy);
                (x * x + y * y).sqrt() + reach < radius
            }
        }
    }

    fn fft2(&self, data: &mut [Complex64], inverse: bool) {
        let plans = self.fft.as_ref().expect("FFT requested on a non-periodic grid");
        let (px, py) = if inverse { (&plans.inv_x, &plans.inv_y) } else { (&plans.fwd_x, &plans.fwd_y) };
        for row in data.chunks_mut(self.nx) {
            px.process(row);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); self.ny];
        for i in 0..self.nx {
            for j in 0..self.ny {
                column[j] = data[j * self.nx + i];
            }
            py.process(&mut column);
            for j in 0..self.ny {
                data[j * self.nx + i] = column[j];
            }
        }
        if inverse {
            let scale = 1.0 / (self.nx * self.ny) as f64;
            for v in data.iter_mut() {
                *v *= scale;
            }
        }
    }

    /// Partial derivatives `(∂_x f, ∂_y f)` of complex grid data.
    pub fn gradient(&self, f: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
        assert_eq!(f.len(), self.len());
        match self.domain {
            Domain::Torus { .. } => {
                let mut spec = f.to_vec();
                self.fft2(&mut spec, false);
                let i = Complex64::new(0.0, 1.0);
                let mut sx = spec.clone();
                let mut sy = spec;
                for j in 0..self.ny {
                    for ix in 0..self.nx {
                        let idx = j * self.nx + ix;
                        sx[idx] *= i * self.kx[ix];
                        sy[idx] *= i * self.ky[j];
                    }
                }
                self.fft2(&mut sx, true);
                self.fft2(&mut sy, true);
                (sx, sy)
            }
            Domain::Disk { .. } => (self.fd_axis(f, true), self.fd_axis(f, false)),
        }
    }

    fn fd_axis(&self, f: &[Complex64], along_x: bool) -> Vec<Complex64> {
        let (n, h) = if along_x { (self.nx, self.dx) } else { (self.ny, self.dy) };
        let at = |i: usize, j: usize, off: isize| -> Complex64 {
            let (ii, jj) = if along_x { (i as isize + off, j as isize) } else { (i as isize, j as isize + off) };
            let lim = n as isize;
            let pos = if along_x { ii } else { jj };
            if pos < 0 || pos >= lim {
                Complex64::new(0.0, 0.0)
            } else {
                f[jj as usize * self.nx + ii as usize]
            }
        };
        let mut out = vec![Complex64::new(0.0, 0.0); f.len()];
        for j in 0..self.ny {
            for i in 0..self.nx {
                let d = (at(i, j, -2) - 8.0 * at(i, j, -1) + 8.0 * at(i, j, 1) - at(i, j, 2)) / (12.0 * h);
                out[j * self.nx + i] = d;
            }
        }
        out
    }

    /// Flat Laplacian of periodic data.
    pub fn laplacian(&self, f: &[f64]) -> Vec<f64> {
        let mut spec: Vec<Complex64> = f.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft2(&mut spec, false);
        let (k2x, k2y) = self.squared_wavenumbers();
        for j in 0..self.ny {
            for i in 0..self.nx {
                spec[j * self.nx + i] *= -(k2x[i] + k2y[j]);
            }
        }
        self.fft2(&mut spec, true);
        spec.iter().map(|c| c.re).collect()
    }

    fn squared_wavenumbers(&self) -> (Vec<f64>, Vec<f64>) {
        match self.domain {
            Domain::Torus { length } => (squared_wavenumbers(self.nx, length), squared_wavenumbers(self.ny, length)),
            Domain::Disk { .. } => panic!("spectral Laplacian requested on a disk grid"),
        }
    }

    /// Solves the flat Poisson equation `Δu = f` on the torus after
    /// projecting out the mean of `f`; returns the zero-mean solution.
    pub fn solve_poisson(&self, f: &[f64]) -> Vec<f64> {
        let mut spec: Vec<Complex64> = f.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft2(&mut spec, false);
        let (k2x, k2y) = self.squared_wavenumbers();
        for j in 0..self.ny {
            for i in 0..self.nx {
                let k2 = k2x[i] + k2y[j];
                let idx = j * self.nx + i;
                spec[idx] = if k2 == 0.0 { Complex64::new(0.0, 0.0) } else { -spec[idx] / k2 };
            }
        }
        self.fft2(&mut spec, true);
        spec.iter().map(|c| c.re).collect()
    }
}

/// A real field sampled on a grid.
#[derive(Debug, Clone)]
pub struct ScalarField {
    pub grid: Arc<Grid2>,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn from_fn(grid: &Arc<Grid2>, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let values = grid.points().map(|(_, x, y)| f(x, y)).collect();
        ScalarField { grid: grid.clone(), values }
    }

    pub fn try_from_fn<E>(grid: &Arc<Grid2>, mut f: impl FnMut(f64, f64) -> Result<f64, E>) -> Result<Self, E> {
        let values = grid.points().map(|(_, x, y)| f(x, y)).collect::<Result<_, _>>()?;
        Ok(ScalarField { grid: grid.clone(), values })
    }

    /// Maximum absolute value over nodes inside the domain.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().zip(&self.grid.mask).filter(|(_, &m)| m).fold(0.0, |acc, (v, _)| acc.max(v.abs()))
    }

    pub fn max(&self) -> f64 {
        self.masked().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.masked().fold(f64::INFINITY, f64::min)
    }

    fn masked(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().zip(&self.grid.mask).filter(|(_, &m)| m).map(|(v, _)| *v)
    }

    /// Trapezoid integral `∫ f · weight dx dy`.
    pub fn integrate_weighted(&self, weight: &[f64]) -> f64 {
        self.grid.weights().iter().zip(&self.values).zip(weight).map(|((w, v), g)| w * v * g).sum()
    }

    pub fn integrate(&self) -> f64 {
        self.grid.weights().iter().zip(&self.values).map(|(w, v)| w * v).sum()
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        assert_eq!(self.values.len(), other.values.len());
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField { grid: self.grid.clone(), values: self.values.iter().map(|v| f(*v)).collect() }
    }

    /// Writes `x,y,value` rows for nodes inside the domain.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "x,y,value")?;
        for (idx, x, y) in self.grid.points() {
            if self.grid.mask[idx] {
                writeln!(out, "{x:.12e},{y:.12e},{:.12e}", self.values[idx])?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn torus(n: usize) -> Arc<Grid2> {
        Grid2::new(Domain::Torus { length: 2.0 * PI }, n, n)
    }

    #[test]
    fn spectral_gradient_is_exact_on_trig_polynomials() {
        let g = torus(16);
        let f: Vec<Complex64> =
            g.points().map(|(_, x, y)| Complex64::new((2.0 * x).sin() * y.cos(), x.cos())).collect();
        let (fx, fy) = g.gradient(&f);
        for (idx, x, y) in g.points() {
            let ex = Complex64::new(2.0 * (2.0 * x).cos() * y.cos(), -x.sin());
            let ey = Complex64::new(-(2.0 * x).sin() * y.sin(), 0.0);
            assert!((fx[idx] - ex).norm() < 1e-12);
            assert!((fy[idx] - ey).norm() < 1e-12);
        }
    }

    #[test]
    fn poisson_inverts_laplacian() {
        let g = torus(32);
        let u: Vec<f64> = g.points().map(|(_, x, y)| (x + 2.0 * y).sin() + 0.3 * (3.0 * x).cos()).collect();
        let f = g.laplacian(&u);
        let sol = g.solve_poisson(&f);
        for (a, b) in sol.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fourth_order_differences_converge() {
        let err = |n: usize| {
            let g = Grid2::new(Domain::Disk { radius: 1.0 }, n, n);
            let bump = |x: f64, y: f64| (-8.0 * (x * x + y * y)).exp();
            let f: Vec<Complex64> = g.points().map(|(_, x, y)| Complex64::new(bump(x, y), 0.0)).collect();
            let (fx, _) = g.gradient(&f);
            g.points()
                .filter(|(idx, _, _)| g.stencil_interior(*idx))
                .map(|(idx, x, y)| (fx[idx].re + 16.0 * x * bump(x, y)).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(41), err(81));
        assert!(e1 / e2 > 12.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn disk_weights_approximate_area() {
        let g = Grid2::new(Domain::Disk { radius: 1.0 }, 201, 201);
        let area: f64 = g.weights().iter().sum();
        assert!((area - PI).abs() < 2e-2);
    }
}
