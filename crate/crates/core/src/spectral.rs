//! Pseudo-spectral fields on the 2-torus and the Fourier multipliers of the scheme.
//!
//! Fourier convention: f(x) = sum_m f^(m) e^{i m.x} with f^(m) = (2 pi)^-2 int f e^{-i m.x},
//! so the discrete transform is normalised by 1/N^2 on the way in. Grid points are
//! x_j = 2 pi j / N. Homogeneous Sobolev norms carry the (2 pi)^2 volume factor:
//! |f|^2_{H^s} = (2 pi)^2 sum_m |m|^{2s} |f^(m)|^2.

use num_complex::Complex64 as C64;
use rand::Rng;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

/// Fourier coefficients below this are treated as absent.
pub const MEAN_TOLERANCE: f64 = 1e-12;
/// Relative divergence above which a field is rejected as not solenoidal.
pub const SOLENOIDAL_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("grid size {0} must be even and at least 16")]
    BadGrid(usize),
    #[error("negative power {power} applied to a field with mean {mean:e}")]
    NegativePowerOnMean { power: f64, mean: f64 },
    #[error("field is not divergence free (relative divergence {0:e})")]
    NotSolenoidal(f64),
    #[error("band reaching |xi| = {reach} exceeds the dealiasing radius {radius}")]
    BandExceedsGrid { reach: f64, radius: f64 },
}

/// Square grid of N x N points with cached FFT plans.
pub struct Grid {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid").field("n", &self.n).finish()
    }
}

impl Grid {
    pub fn new(n: usize) -> Result<Arc<Self>, SpectralError> {
        if n < 16 || n % 2 != 0 {
            return Err(SpectralError::BadGrid(n));
        }
        let mut planner = FftPlanner::new();
        Ok(Arc::new(Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }))
    }

    /// Smallest admissible grid on which products of two fields with
    /// frequencies up to `radius` are resolved without aliasing.
    pub fn size_for_products(radius: f64) -> usize {
        let n = (6.0 * radius).ceil() as usize + 1;
        (n + n % 2).max(16)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn spacing(&self) -> f64 {
        2.0 * PI / self.n as f64
    }

    /// Modes with a coordinate beyond this are zeroed after products.
    pub fn dealias_radius(&self) -> f64 {
        self.n as f64 / 3.0
    }

    pub fn wavenumber(&self, i: usize) -> i64 {
        if i <= self.n / 2 {
            i as i64
        } else {
            i as i64 - self.n as i64
        }
    }

    pub fn mode(&self, idx: usize) -> [i64; 2] {
        [self.wavenumber(idx / self.n), self.wavenumber(idx % self.n)]
    }

    /// Storage index of a mode, if it lies on the grid.
    pub fn index(&self, m: [i64; 2]) -> Option<usize> {
        let h = (self.n / 2) as i64;
        if m.iter().any(|&c| c <= -h || c > h) {
            return None;
        }
        let wrap = |c: i64| if c < 0 { (c + self.n as i64) as usize } else { c as usize };
        Some(wrap(m[0]) * self.n + wrap(m[1]))
    }

    pub fn point(&self, idx: usize) -> [f64; 2] {
        let h = self.spacing();
        [h * (idx / self.n) as f64, h * (idx % self.n) as f64]
    }

    fn is_retained(&self, m: [i64; 2]) -> bool {
        let r = self.dealias_radius();
        let nyq = (self.n / 2) as i64;
        m.iter().all(|&c| (c.abs() as f64) <= r && c != nyq)
    }

    fn transform(&self, data: &mut [C64], plan: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        let scratch_len = plan.get_inplace_scratch_len();
        let rows = |buf: &mut [C64]| {
            buf.par_chunks_mut(n).for_each_init(
                || vec![C64::new(0.0, 0.0); scratch_len],
                |scratch, row| plan.process_with_scratch(row, scratch),
            );
        };
        rows(data);
        let mut t = transpose(data, n);
        rows(&mut t);
        data.copy_from_slice(&transpose(&t, n));
    }

    /// Physical values to Fourier coefficients, in place.
    pub fn forward(&self, data: &mut [C64]) {
        self.transform(data, &self.forward);
        let s = 1.0 / self.len() as f64;
        data.iter_mut().for_each(|c| *c *= s);
    }

    /// Fourier coefficients to physical values, in place.
    pub fn inverse(&self, data: &mut [C64]) {
        self.transform(data, &self.inverse);
    }
}

fn transpose(a: &[C64], n: usize) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); a.len()];
    const B: usize = 32;
    for ib in (0..n).step_by(B) {
        for jb in (0..n).step_by(B) {
            for i in ib..(ib + B).min(n) {
                for j in jb..(jb + B).min(n) {
                    out[j * n + i] = a[i * n + j];
                }
            }
        }
    }
    out
}

fn norm2(m: [i64; 2]) -> f64 {
    (m[0] * m[0] + m[1] * m[1]) as f64
}

/// Real field with C components stored as Fourier coefficients.
#[derive(Clone, Debug)]
pub struct Field<const C: usize> {
    grid: Arc<Grid>,
    hat: [Vec<C64>; C],
}

pub type ScalarField = Field<1>;
pub type VectorField = Field<2>;

impl<const C: usize> Field<C> {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Self { grid: grid.clone(), hat: std::array::from_fn(|_| vec![C64::new(0.0, 0.0); grid.len()]) }
    }

    pub fn from_hat(grid: &Arc<Grid>, hat: [Vec<C64>; C]) -> Self {
        assert!(hat.iter().all(|h| h.len() == grid.len()));
        Self { grid: grid.clone(), hat }
    }

    /// Transform physical samples; the Nyquist row and column are discarded.
    pub fn from_physical(grid: &Arc<Grid>, values: [Vec<f64>; C]) -> Self {
        let hat = values.map(|v| {
            let mut c: Vec<C64> = v.into_iter().map(|x| C64::new(x, 0.0)).collect();
            grid.forward(&mut c);
            c
        });
        let mut f = Self { grid: grid.clone(), hat };
        f.clear_nyquist();
        f
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn([f64; 2]) -> [f64; C]) -> Self {
        let mut values: [Vec<f64>; C] = std::array::from_fn(|_| Vec::with_capacity(grid.len()));
        for idx in 0..grid.len() {
            let v = f(grid.point(idx));
            for c in 0..C {
                values[c].push(v[c]);
            }
        }
        Self::from_physical(grid, values)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn hat(&self, c: usize) -> &[C64] {
        &self.hat[c]
    }

    pub fn hat_mut(&mut self, c: usize) -> &mut [C64] {
        &mut self.hat[c]
    }

    pub fn into_hat(self) -> [Vec<C64>; C] {
        self.hat
    }

    /// Coefficient of mode m in component c (zero off the grid).
    pub fn coeff(&self, c: usize, m: [i64; 2]) -> C64 {
        self.grid.index(m).map_or(C64::new(0.0, 0.0), |i| self.hat[c][i])
    }

    /// Physical values of every component.
    pub fn physical(&self) -> [Vec<f64>; C] {
        std::array::from_fn(|c| {
            let mut buf = self.hat[c].clone();
            self.grid.inverse(&mut buf);
            buf.into_iter().map(|z| z.re).collect()
        })
    }

    fn clear_nyquist(&mut self) {
        let n = self.grid.n;
        let h = n / 2;
        for comp in self.hat.iter_mut() {
            for j in 0..n {
                comp[h * n + j] = C64::new(0.0, 0.0);
                comp[j * n + h] = C64::new(0.0, 0.0);
            }
        }
    }

    /// Zero every mode outside the 2/3 box.
    pub fn dealias(mut self) -> Self {
        let grid = self.grid.clone();
        for comp in self.hat.iter_mut() {
            for (i, c) in comp.iter_mut().enumerate() {
                if !grid.is_retained(grid.mode(i)) {
                    *c = C64::new(0.0, 0.0);
                }
            }
        }
        self
    }

    /// Multiply every component by a real symbol.
    pub fn multiplier(&self, symbol: impl Fn([i64; 2]) -> f64 + Sync) -> Self {
        let grid = &self.grid;
        let hat = std::array::from_fn(|c| {
            self.hat[c]
                .par_iter()
                .enumerate()
                .map(|(i, &z)| z * symbol(grid.mode(i)))
                .collect()
        });
        Self { grid: grid.clone(), hat }
    }

    pub fn partial(&self, axis: usize) -> Self {
        let grid = &self.grid;
        let hat = std::array::from_fn(|c| {
            self.hat[c]
                .iter()
                .enumerate()
                .map(|(i, &z)| z * C64::new(0.0, grid.mode(i)[axis] as f64))
                .collect()
        });
        Self { grid: grid.clone(), hat }
    }

    pub fn mean(&self, c: usize) -> C64 {
        self.hat[c][0]
    }

    /// Nonzero-mode projection.
    pub fn mean_free(&self) -> Self {
        let mut out = self.clone();
        for comp in out.hat.iter_mut() {
            comp[0] = C64::new(0.0, 0.0);
        }
        out
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.hat.iter_mut().flatten().for_each(|z| *z *= s);
        out
    }

    /// self += s * other
    pub fn axpy(&mut self, s: f64, other: &Self) {
        for (a, b) in self.hat.iter_mut().zip(other.hat.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y * s;
            }
        }
    }

    /// Exact change of grid for fields whose frequencies fit on both grids.
    pub fn resample(&self, grid: &Arc<Grid>) -> Self {
        let mut out = Self::zeros(grid);
        for i in 0..self.grid.len() {
            let m = self.grid.mode(i);
            if let Some(j) = grid.index(m) {
                for c in 0..C {
                    out.hat[c][j] = self.hat[c][i];
                }
            }
        }
        out.clear_nyquist();
        out
    }

    /// Largest |f(x)| over grid points (Euclidean across components).
    pub fn sup_norm(&self) -> f64 {
        let phys = self.physical();
        (0..self.grid.len())
            .map(|i| phys.iter().map(|p| p[i] * p[i]).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Homogeneous Sobolev norm of order s (the mean counts only when s = 0).
    pub fn hs_norm(&self, s: f64) -> f64 {
        let grid = &self.grid;
        let mut acc = 0.0;
        for comp in &self.hat {
            for (i, z) in comp.iter().enumerate() {
                let a = z.norm_sqr();
                if a == 0.0 {
                    continue;
                }
                let r2 = norm2(grid.mode(i));
                if r2 == 0.0 && s != 0.0 {
                    continue;
                }
                acc += r2.powf(s) * a;
            }
        }
        2.0 * PI * acc.sqrt()
    }

    /// sup|f| + sup|d1 f| + sup|d2 f|.
    pub fn c1_norm(&self) -> f64 {
        self.sup_norm() + self.partial(0).sup_norm() + self.partial(1).sup_norm()
    }

    /// Sum of |f^(m)|^2 over modes with |m| > radius.
    pub fn mass_outside(&self, radius: f64) -> f64 {
        self.mass_where(|r| r > radius)
    }

    /// Sum of |f^(m)|^2 over modes with |m| in the given set.
    pub fn mass_where(&self, inside: impl Fn(f64) -> bool) -> f64 {
        let grid = &self.grid;
        let mut acc = 0.0;
        for comp in &self.hat {
            for (i, z) in comp.iter().enumerate() {
                if z.norm_sqr() > 0.0 && inside(norm2(grid.mode(i)).sqrt()) {
                    acc += z.norm_sqr();
                }
            }
        }
        acc
    }

    /// Largest |m| carrying a coefficient above `tol`.
    pub fn support_radius(&self, tol: f64) -> f64 {
        let grid = &self.grid;
        let mut r = 0.0f64;
        for comp in &self.hat {
            for (i, z) in comp.iter().enumerate() {
                if z.norm() > tol {
                    r = r.max(norm2(grid.mode(i)).sqrt());
                }
            }
        }
        r
    }

    /// Indices of modes carrying any nonzero coefficient.
    pub fn support(&self) -> Vec<usize> {
        (0..self.grid.len()).filter(|&i| self.hat.iter().any(|c| c[i] != C64::new(0.0, 0.0))).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.hat.iter().flatten().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl<const C: usize> std::ops::Add<&Field<C>> for &Field<C> {
    type Output = Field<C>;
    fn add(self, rhs: &Field<C>) -> Field<C> {
        let mut out = self.clone();
        out.axpy(1.0, rhs);
        out
    }
}

impl<const C: usize> std::ops::Sub<&Field<C>> for &Field<C> {
    type Output = Field<C>;
    fn sub(self, rhs: &Field<C>) -> Field<C> {
        let mut out = self.clone();
        out.axpy(-1.0, rhs);
        out
    }
}

impl VectorField {
    pub fn components(&self) -> [ScalarField; 2] {
        std::array::from_fn(|c| ScalarField::from_hat(&self.grid, [self.hat[c].clone()]))
    }

    pub fn from_components(a: ScalarField, b: ScalarField) -> Self {
        let grid = a.grid.clone();
        let [x] = a.into_hat();
        let [y] = b.into_hat();
        Self::from_hat(&grid, [x, y])
    }
}

/// Symmetric trace-free 2x2 field stored by its (1,1) and (1,2) entries.
#[derive(Clone, Debug)]
pub struct SymTfField(pub Field<2>);

impl SymTfField {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Self(Field::zeros(grid))
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.0.grid()
    }

    /// Largest entry in absolute value over grid points.
    pub fn sup_norm(&self) -> f64 {
        self.0.physical().iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Frobenius-type homogeneous Sobolev norm (all four entries).
    pub fn hs_norm(&self, s: f64) -> f64 {
        std::f64::consts::SQRT_2 * self.0.hs_norm(s)
    }

    /// Physical values as (r11, r12) arrays.
    pub fn physical(&self) -> [Vec<f64>; 2] {
        self.0.physical()
    }

    pub fn axpy(&mut self, s: f64, other: &Self) {
        self.0.axpy(s, &other.0);
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0.scale(s))
    }

    pub fn mass_outside(&self, radius: f64) -> f64 {
        self.0.mass_outside(radius)
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}

impl std::ops::Add<&SymTfField> for &SymTfField {
    type Output = SymTfField;
    fn add(self, rhs: &SymTfField) -> SymTfField {
        SymTfField(&self.0 + &rhs.0)
    }
}

impl std::ops::Sub<&SymTfField> for &SymTfField {
    type Output = SymTfField;
    fn sub(self, rhs: &SymTfField) -> SymTfField {
        SymTfField(&self.0 - &rhs.0)
    }
}


fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

/// Apply a 2x2 complex symbol to a vector field mode by mode.
fn vector_symbol(v: &VectorField, symbol: impl Fn([i64; 2], C64, C64) -> (C64, C64) + Sync) -> VectorField {
    let grid = v.grid().clone();
    let (a, b) = (v.hat(0), v.hat(1));
    let (x, y): (Vec<C64>, Vec<C64>) =
        (0..grid.len()).into_par_iter().map(|i| symbol(grid.mode(i), a[i], b[i])).unzip();
    VectorField::from_hat(&grid, [x, y])
}

/// Lambda^r with symbol |m|^r. The mean is sent to zero for r != 0; a
/// negative power refuses fields with a nonzero mean.
pub fn frac_laplacian<const C: usize>(f: &Field<C>, r: f64) -> Result<Field<C>, SpectralError> {
    if r < 0.0 {
        let mean = (0..C).map(|c| f.mean(c).norm()).fold(0.0, f64::max);
        if mean > MEAN_TOLERANCE {
            return Err(SpectralError::NegativePowerOnMean { power: r, mean });
        }
    }
    if r == 0.0 {
        return Ok(f.clone());
    }
    Ok(f.multiplier(|m| {
        let r2 = norm2(m);
        if r2 == 0.0 {
            0.0
        } else {
            r2.powf(0.5 * r)
        }
    }))
}

/// Lambda^r after discarding the mean.
pub fn lambda_pow<const C: usize>(f: &Field<C>, r: f64) -> Field<C> {
    frac_laplacian(&f.mean_free(), r).expect("mean was removed")
}

/// Leray projection; the output is mean free and divergence free.
pub fn leray(v: &VectorField) -> VectorField {
    vector_symbol(v, |m, a, b| {
        let r2 = norm2(m);
        if r2 == 0.0 {
            return (zero(), zero());
        }
        let (m1, m2) = (m[0] as f64, m[1] as f64);
        let d = (a * m1 + b * m2) / r2;
        (a - d * m1, b - d * m2)
    })
}

/// Inverse divergence: (Bf)^{ij} = -d_j Lambda^-2 g_i - d_i Lambda^-2 g_j with g the
/// Leray projection of the mean-free part of f. Symmetric, trace free, div Bf = g.
pub fn inverse_divergence(f: &VectorField) -> SymTfField {
    let g = leray(f);
    let grid = g.grid().clone();
    let (a, b) = (g.hat(0), g.hat(1));
    let (r11, r12): (Vec<C64>, Vec<C64>) = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let m = grid.mode(i);
            let r2 = norm2(m);
            if r2 == 0.0 {
                return (zero(), zero());
            }
            let (m1, m2) = (m[0] as f64, m[1] as f64);
            let mi = C64::new(0.0, -1.0 / r2);
            (mi * (a[i] * (2.0 * m1)), mi * (a[i] * m2 + b[i] * m1))
        })
        .unzip();
    SymTfField(Field::from_hat(&grid, [r11, r12]))
}

/// Row divergence of a symmetric trace-free field.
pub fn div_sym(r: &SymTfField) -> VectorField {
    vector_symbol(&r.0, |m, a11, a12| {
        let (m1, m2) = (m[0] as f64, m[1] as f64);
        let i = C64::new(0.0, 1.0);
        (i * (a11 * m1 + a12 * m2), i * (a12 * m1 - a11 * m2))
    })
}

pub fn divergence(v: &VectorField) -> ScalarField {
    let [a, b] = [v.partial(0), v.partial(1)];
    let mut out = ScalarField::from_hat(v.grid(), [a.hat(0).to_vec()]);
    for (o, y) in out.hat_mut(0).iter_mut().zip(b.hat(1)) {
        *o += y;
    }
    out
}

/// Scalar curl d1 v2 - d2 v1.
pub fn curl(v: &VectorField) -> ScalarField {
    let [a, b] = [v.partial(0), v.partial(1)];
    let mut out = ScalarField::from_hat(v.grid(), [a.hat(1).to_vec()]);
    for (o, y) in out.hat_mut(0).iter_mut().zip(b.hat(0)) {
        *o -= y;
    }
    out
}

pub fn gradient(f: &ScalarField) -> VectorField {
    let [a] = f.partial(0).into_hat();
    let [b] = f.partial(1).into_hat();
    VectorField::from_hat(f.grid(), [a, b])
}

/// Rotation by a quarter turn, (v1, v2) -> (-v2, v1).
pub fn perp(v: &VectorField) -> VectorField {
    let a = v.hat(1).iter().map(|z| -z).collect();
    VectorField::from_hat(v.grid(), [a, v.hat(0).to_vec()])
}

/// Relative divergence |div v|_inf / |v|_inf.
pub fn relative_divergence(v: &VectorField) -> f64 {
    let s = v.sup_norm();
    if s == 0.0 {
        0.0
    } else {
        divergence(v).sup_norm() / s
    }
}

fn from_products<const C: usize>(grid: &Arc<Grid>, values: [Vec<f64>; C]) -> Field<C> {
    Field::from_physical(grid, values).dealias()
}

pub fn dot(u: &VectorField, v: &VectorField) -> ScalarField {
    let [u1, u2] = u.physical();
    let [v1, v2] = v.physical();
    let p = (0..u1.len()).map(|i| u1[i] * v1[i] + u2[i] * v2[i]).collect();
    from_products(u.grid(), [p])
}

pub fn scalar_times(s: &ScalarField, v: &VectorField) -> VectorField {
    let [s] = s.physical();
    let [v1, v2] = v.physical();
    let a = s.iter().zip(&v1).map(|(x, y)| x * y).collect();
    let b = s.iter().zip(&v2).map(|(x, y)| x * y).collect();
    from_products(v.grid(), [a, b])
}

/// (u . grad) v.
pub fn advect(u: &VectorField, v: &VectorField) -> VectorField {
    let [u1, u2] = u.physical();
    let [a1, a2] = v.partial(0).physical();
    let [b1, b2] = v.partial(1).physical();
    let x = (0..u1.len()).map(|i| u1[i] * a1[i] + u2[i] * b1[i]).collect();
    let y = (0..u1.len()).map(|i| u1[i] * a2[i] + u2[i] * b2[i]).collect();
    from_products(u.grid(), [x, y])
}

/// (grad a)^T b, the vector with components sum_j (d_i a_j) b_j.
pub fn grad_transpose_dot(a: &VectorField, b: &VectorField) -> VectorField {
    let [b1, b2] = b.physical();
    let [p11, p12] = a.partial(0).physical();
    let [p21, p22] = a.partial(1).physical();
    let x = (0..b1.len()).map(|i| p11[i] * b1[i] + p12[i] * b2[i]).collect();
    let y = (0..b1.len()).map(|i| p21[i] * b1[i] + p22[i] * b2[i]).collect();
    from_products(a.grid(), [x, y])
}

/// u^perp (grad^perp . v).
pub fn perp_curl(u: &VectorField, v: &VectorField) -> VectorField {
    let [u1, u2] = u.physical();
    let [c] = curl(v).physical();
    let x = (0..u1.len()).map(|i| -u2[i] * c[i]).collect();
    let y = (0..u1.len()).map(|i| u1[i] * c[i]).collect();
    from_products(u.grid(), [x, y])
}

/// (u . grad) v - (grad v)^T u, assembled term by term.
pub fn transport_form(u: &VectorField, v: &VectorField) -> VectorField {
    &advect(u, v) - &grad_transpose_dot(v, u)
}

/// SQG nonlinearity (Lambda v)^perp (grad^perp . v) of a divergence-free field.
pub fn sqg_nonlinearity(v: &VectorField) -> Result<VectorField, SpectralError> {
    let rel = relative_divergence(v);
    if rel > SOLENOIDAL_TOLERANCE {
        return Err(SpectralError::NotSolenoidal(rel));
    }
    Ok(perp_curl(&lambda_pow(v, 1.0), v))
}

/// Bilinear nonlinearity N(a, b) = (Lambda a)^perp (grad^perp . b); N(v) = N(v, v).
pub fn nonlinearity(a: &VectorField, b: &VectorField) -> VectorField {
    perp_curl(&lambda_pow(a, 1.0), b)
}

/// Smooth step: 1 on [0, 1/16], exp(1 - 1/(1 - s^2)) on the ramp, 0 from 1/8.
pub fn bump_profile(r: f64) -> f64 {
    const INNER: f64 = 1.0 / 16.0;
    if r <= INNER {
        1.0
    } else if r >= 2.0 * INNER {
        0.0
    } else {
        let s = (r - INNER) / INNER;
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

/// Symbol K^(m / lambda - k) of the band projector around lambda k.
pub fn band_symbol(m: [i64; 2], k: [f64; 2], lambda: f64) -> f64 {
    let d0 = m[0] as f64 / lambda - k[0];
    let d1 = m[1] as f64 / lambda - k[1];
    bump_profile(d0.hypot(d1))
}

/// Outer frequency of the band around lambda k for a unit direction k.
pub fn band_reach(lambda: f64) -> f64 {
    1.125 * lambda
}

fn check_band(grid: &Grid, reach: f64) -> Result<(), SpectralError> {
    let radius = grid.dealias_radius();
    if reach > radius {
        Err(SpectralError::BandExceedsGrid { reach, radius })
    } else {
        Ok(())
    }
}

/// Leray projection of the frequency band around lambda k.
pub fn band_project(v: &VectorField, k: [f64; 2], lambda: f64) -> Result<VectorField, SpectralError> {
    check_band(v.grid(), band_reach(lambda))?;
    Ok(leray(&v.multiplier(|m| band_symbol(m, k, lambda))))
}

/// Radial symbol equal to 1 on [3 lambda/8, 3 lambda] and vanishing outside [lambda/4, 4 lambda].
pub fn annulus_symbol(r: f64, lambda: f64) -> f64 {
    let x = r / lambda;
    if !(0.25..=4.0).contains(&x) {
        0.0
    } else if x < 0.375 {
        bump_profile((0.375 - x) / 2.0 + 1.0 / 16.0)
    } else if x <= 3.0 {
        1.0
    } else {
        bump_profile((x - 3.0) / 16.0 + 1.0 / 16.0)
    }
}

pub fn annulus_project<const C: usize>(f: &Field<C>, lambda: f64) -> Result<Field<C>, SpectralError> {
    check_band(f.grid(), 4.0 * lambda)?;
    Ok(f.multiplier(|m| annulus_symbol(norm2(m).sqrt(), lambda)))
}

/// Hard cutoff keeping modes with |m| <= radius.
pub fn truncate<const C: usize>(f: &Field<C>, radius: f64) -> Field<C> {
    f.multiplier(|m| if norm2(m) <= radius * radius { 1.0 } else { 0.0 })
}

/// Hoelder seminorm of a uniformly sampled path, estimated over the dyadic
/// gaps dt, 2 dt, 4 dt, ...; `dist(i, j)` is the distance between samples i and j.
pub fn holder_seminorm(samples: usize, dt: f64, exponent: f64, dist: impl Fn(usize, usize) -> f64) -> f64 {
    let mut best = 0.0f64;
    let mut gap = 1;
    while gap < samples {
        let h = (gap as f64 * dt).powf(exponent);
        for i in 0..samples - gap {
            best = best.max(dist(i, i + gap) / h);
        }
        gap *= 2;
    }
    best
}

/// Modes in a closed ball, one representative of each +/- pair plus the zero mode first.
#[derive(Debug, Clone)]
pub struct ModeSet {
    modes: Vec<[i64; 2]>,
    reach: [usize; 2],
}

impl ModeSet {
    pub fn ball(radius: f64) -> Arc<Self> {
        let r = radius.max(0.0).floor() as i64;
        let mut modes = vec![[0, 0]];
        for m1 in 0..=r {
            for m2 in -r..=r {
                let half = m1 > 0 || m2 > 0;
                if half && m1 * m1 + m2 * m2 <= r * r && (m1 * m1 + m2 * m2) as f64 <= radius * radius {
                    modes.push([m1, m2]);
                }
            }
        }
        let reach = [r as usize, r as usize];
        Arc::new(Self { modes, reach })
    }

    pub fn modes(&self) -> &[[i64; 2]] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }
}

/// Field restricted to a mode set, evaluated directly at arbitrary points.
#[derive(Debug, Clone)]
pub struct SparseField<const C: usize> {
    set: Arc<ModeSet>,
    coeffs: [Vec<C64>; C],
}

impl<const C: usize> SparseField<C> {
    pub fn zeros(set: &Arc<ModeSet>) -> Self {
        Self { set: set.clone(), coeffs: std::array::from_fn(|_| vec![zero(); set.len()]) }
    }

    pub fn set(&self) -> &Arc<ModeSet> {
        &self.set
    }

    pub fn coeffs(&self, c: usize) -> &[C64] {
        &self.coeffs[c]
    }

    pub fn coeffs_mut(&mut self, c: usize) -> &mut [C64] {
        &mut self.coeffs[c]
    }

    pub fn axpy(&mut self, s: f64, other: &Self) {
        assert!(Arc::ptr_eq(&self.set, &other.set) || self.set.modes == other.set.modes);
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y * s;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().flatten().all(|z| z.norm_sqr() == 0.0)
    }

    /// Upper bound on the sup norm of each component.
    pub fn coefficient_bound(&self) -> f64 {
        self.coeffs
            .iter()
            .map(|c| c.iter().enumerate().map(|(i, z)| if i == 0 { z.norm() } else { 2.0 * z.norm() }).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn eval(&self, x: [f64; 2]) -> [f64; C] {
        let [r1, r2] = self.set.reach;
        let e1 = C64::from_polar(1.0, x[0]);
        let e2 = C64::from_polar(1.0, x[1]);
        let mut p1 = Vec::with_capacity(r1 + 1);
        let mut acc = C64::new(1.0, 0.0);
        for _ in 0..=r1 {
            p1.push(acc);
            acc *= e1;
        }
        let mut p2 = vec![C64::new(1.0, 0.0); 2 * r2 + 1];
        let mut acc = C64::new(1.0, 0.0);
        for j in 1..=r2 {
            acc *= e2;
            p2[r2 + j] = acc;
            p2[r2 - j] = acc.conj();
        }
        let mut out = [0.0; C];
        for (i, m) in self.set.modes.iter().enumerate() {
            let phase = p1[m[0] as usize] * p2[(m[1] + r2 as i64) as usize];
            let w = if i == 0 { 1.0 } else { 2.0 };
            for c in 0..C {
                out[c] += w * (self.coeffs[c][i] * phase).re;
            }
        }
        out
    }

    pub fn eval_many(&self, points: &[[f64; 2]]) -> Vec<[f64; C]> {
        points.par_iter().map(|&x| self.eval(x)).collect()
    }
}

impl<const C: usize> Field<C> {
    /// Keep only the coefficients of the given modes.
    pub fn restrict(&self, set: &Arc<ModeSet>) -> SparseField<C> {
        let mut out = SparseField::zeros(set);
        for (i, &m) in set.modes.iter().enumerate() {
            for c in 0..C {
                out.coeffs[c][i] = self.coeff(c, m);
            }
        }
        out
    }
}

/// Measured operator-norm bound C1 >= 1 of the band projectors on sup norms.
///
/// Probes are plane waves, sign patterns of the projector kernel (which attain the
/// kernel's L1 norm) and `random` random fields.
pub fn projection_constant(rng: &mut impl Rng, random: usize) -> f64 {
    let grid = Grid::new(64).expect("valid grid");
    let lambda = 8.0;
    let dirs = [[1.0, 0.0], [0.6, 0.8]];
    let mut best = 1.0f64;
    let mut record = |f: &VectorField, k: [f64; 2]| {
        let s = f.sup_norm();
        if s > 0.0 {
            let p = band_project(f, k, lambda).expect("band fits");
            best = best.max(p.sup_norm() / s);
        }
    };
    for &k in &dirs {
        let perp_k = [-k[1], k[0]];
        let wave = VectorField::from_fn(&grid, |x| {
            let c = (lambda * (k[0] * x[0] + k[1] * x[1])).cos();
            [perp_k[0] * c, perp_k[1] * c]
        });
        record(&wave, k);
        for input in 0..2 {
            let mut delta = VectorField::zeros(&grid);
            let v = 1.0 / grid.len() as f64;
            for z in delta.hat_mut(input).iter_mut() {
                *z = C64::new(v, 0.0);
            }
            let kernel = leray(&delta.multiplier(|m| band_symbol(m, k, lambda))).physical();
            for out in 0..2 {
                let n = grid.n();
                let mut vals = [vec![0.0; grid.len()], vec![0.0; grid.len()]];
                for i in 0..n {
                    for j in 0..n {
                        let src = ((n - i) % n) * n + (n - j) % n;
                        vals[input][i * n + j] = kernel[out][src].signum();
                    }
                }
                record(&VectorField::from_physical(&grid, vals), k);
            }
        }
        for _ in 0..random {
            let vals = [0, 1].map(|_| (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
            record(&VectorField::from_physical(&grid, vals), k);
        }
    }
    best
}

/// Embedding and inverse-divergence constants, each doubled after probing.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct EmbeddingConstants {
    pub c_s: f64,
    pub c_0: f64,
}

/// Random real field with a random radius and power-law decay, used by probes and tests.
pub fn random_band_field<const C: usize>(grid: &Arc<Grid>, rng: &mut impl Rng) -> Field<C> {
    let radius = rng.random_range(1.5..grid.dealias_radius() / 2.0);
    let slope = rng.random_range(0.0..4.0);
    let mut f = Field::<C>::zeros(grid);
    for c in 0..C {
        for i in 0..grid.len() {
            let m = grid.mode(i);
            let r = norm2(m).sqrt();
            if r > 0.0 && r <= radius && (m[0] > 0 || (m[0] == 0 && m[1] > 0)) {
                let amp = r.powf(-slope);
                let z = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * amp;
                f.hat_mut(c)[i] = z;
                let j = grid.index([-m[0], -m[1]]).expect("mirror mode");
                f.hat_mut(c)[j] = z.conj();
            }
        }
    }
    f
}

/// Probe |f|_inf <= C_S |f|_{H^{1+s}}, |fg|_{H^s} <= C_S |f|_{H^{(1+s)/2}} |g|_{H^{(1+s)/2}},
/// |Bf|_inf <= C_0 |f|_inf and |Bf|_{H^{1+s}} <= C_0 |f|_{H^s}; C_S is at least 1.
pub fn embedding_constants(sigma: f64, rng: &mut impl Rng, probes: usize) -> EmbeddingConstants {
    let grid = Grid::new(64).expect("valid grid");
    let (mut cs, mut c0) = (1.0f64, 0.0f64);
    let half = 0.5 * (1.0 + sigma);
    for _ in 0..probes {
        let f: ScalarField = random_band_field(&grid, rng);
        let g: ScalarField = random_band_field(&grid, rng);
        cs = cs.max(f.sup_norm() / f.hs_norm(1.0 + sigma));
        let [fp] = f.physical();
        let [gp] = g.physical();
        let fg = ScalarField::from_physical(&grid, [fp.iter().zip(&gp).map(|(a, b)| a * b).collect()]);
        cs = cs.max(fg.hs_norm(sigma) / (f.hs_norm(half) * g.hs_norm(half)));
        let v: VectorField = random_band_field(&grid, rng);
        let b = inverse_divergence(&v);
        c0 = c0.max(b.sup_norm() / v.sup_norm());
        c0 = c0.max(b.hs_norm(1.0 + sigma) / v.hs_norm(sigma));
    }
    EmbeddingConstants { c_s: 2.0 * cs, c_0: 2.0 * c0 }
}
