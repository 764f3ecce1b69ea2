//! Periodic scalar fields on the unit torus with exact spectral calculus.
//!
//! A field stores its samples on the uniform `n × n` grid, `x = (i/n, j/n)`,
//! row-major with `i` along the first coordinate. Everything else (derivatives,
//! off-grid values) is computed from the trigonometric interpolant of those
//! samples, with the Nyquist mode split symmetrically so the interpolant is
//! real everywhere.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, SgError};
use crate::linalg::{Mat2, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridSpec {
    n: usize,
}

impl GridSpec {
    pub fn new(n: usize) -> Result<Self> {
        if n < 8 || n % 2 != 0 {
            return Err(SgError::ConfigInvalid(vec![format!(
                "grid size must be an even integer >= 8, got {n}"
            )]));
        }
        Ok(GridSpec { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of samples, `n²`.
    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.n + j
    }

    pub fn coords(&self, idx: usize) -> [usize; 2] {
        [idx / self.n, idx % self.n]
    }

    pub fn point(&self, idx: usize) -> Vec2 {
        let [i, j] = self.coords(idx);
        [i as f64 / self.n as f64, j as f64 / self.n as f64]
    }

    /// Signed wavenumber of FFT bin `m`; the Nyquist bin maps to `+n/2`.
    /// All node coordinates in row-major order.
    pub fn points(&self) -> Vec<Vec2> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    pub fn wavenumber(&self, m: usize) -> i64 {
        if m <= self.n / 2 {
            m as i64
        } else {
            m as i64 - self.n as i64
        }
    }

    pub(crate) fn check_same(&self, other: &GridSpec) -> Result<()> {
        if self.n != other.n {
            return Err(SgError::GridMismatch(self.n, other.n));
        }
        Ok(())
    }
}

type PlanPair = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

thread_local! {
    static PLANS: RefCell<HashMap<usize, PlanPair>> = RefCell::new(HashMap::new());
}

fn plans(n: usize) -> PlanPair {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry(n)
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
            })
            .clone()
    })
}

fn transpose_in_place(data: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            data.swap(i * n + j, j * n + i);
        }
    }
}

/// Unnormalized 2-D DFT over both axes.
fn fft2(data: &mut [Complex64], n: usize, inverse: bool) {
    let (fwd, inv) = plans(n);
    let plan = if inverse { inv } else { fwd };
    plan.process(data);
    transpose_in_place(data, n);
    plan.process(data);
    transpose_in_place(data, n);
}

/// Spectral factor `(2πik)^order` for one axis, with odd derivatives of the
/// Nyquist mode set to zero.
fn axis_factor(grid: &GridSpec, m: usize, order: usize) -> Complex64 {
    if order == 0 {
        return Complex64::new(1.0, 0.0);
    }
    let n = grid.n();
    if m == n / 2 && order % 2 == 1 {
        return Complex64::new(0.0, 0.0);
    }
    let k = 2.0 * PI * grid.wavenumber(m) as f64;
    Complex64::new(0.0, k).powu(order as u32)
}

/// `n × n` matrix (row-major) of the 1-D spectral derivative of given order.
pub(crate) fn diff_matrix_1d(grid: &GridSpec, order: usize) -> Vec<f64> {
    let n = grid.n();
    let (fwd, inv) = plans(n);
    let mut out = vec![0.0; n * n];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for col in 0..n {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        buf[col] = Complex64::new(1.0, 0.0);
        fwd.process(&mut buf);
        for (m, c) in buf.iter_mut().enumerate() {
            *c *= axis_factor(grid, m, order);
        }
        inv.process(&mut buf);
        for row in 0..n {
            out[row * n + col] = buf[row].re / n as f64;
        }
    }
    out
}

/// Samples of a Z²-periodic real function on the uniform grid.
#[derive(Clone, Debug)]
pub struct PeriodicField {
    grid: GridSpec,
    samples: Vec<f64>,
    spectrum: OnceLock<Arc<[Complex64]>>,
}

impl PartialEq for PeriodicField {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid && self.samples == other.samples
    }
}

impl PeriodicField {
    pub fn new(grid: GridSpec, samples: Vec<f64>) -> Result<Self> {
        if samples.len() != grid.len() {
            return Err(SgError::ConfigInvalid(vec![format!(
                "expected {} samples, got {}",
                grid.len(),
                samples.len()
            )]));
        }
        if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
            return Err(SgError::NonFiniteField {
                what: "samples",
                index,
            });
        }
        Ok(Self::from_vec_unchecked(grid, samples))
    }

    pub(crate) fn from_vec_unchecked(grid: GridSpec, samples: Vec<f64>) -> Self {
        PeriodicField {
            grid,
            samples,
            spectrum: OnceLock::new(),
        }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(Vec2) -> f64) -> Self {
        let samples = (0..grid.len()).map(|idx| f(grid.point(idx))).collect();
        Self::from_vec_unchecked(grid, samples)
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        Self::from_vec_unchecked(grid, vec![value; grid.len()])
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.samples[self.grid.index(i, j)]
    }

    /// Grid average; exact quadrature for trigonometric polynomials resolved
    /// by the grid. Summed in index order so results are reproducible.
    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    pub fn sup_norm(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Minimum sample and its grid coordinates (first occurrence).
    pub fn min_with_location(&self) -> (f64, [usize; 2]) {
        let mut best = (f64::INFINITY, 0);
        for (idx, &v) in self.samples.iter().enumerate() {
            if v < best.0 {
                best = (v, idx);
            }
        }
        (best.0, self.grid.coords(best.1))
    }

    pub fn min(&self) -> f64 {
        self.min_with_location().0
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        match self.samples.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(SgError::NonFiniteField { what, index }),
            None => Ok(()),
        }
    }

    /// Unnormalized DFT coefficients, computed once and cached.
    pub fn spectrum(&self) -> &Arc<[Complex64]> {
        self.spectrum.get_or_init(|| {
            let mut data: Vec<Complex64> = self
                .samples
                .iter()
                .map(|&v| Complex64::new(v, 0.0))
                .collect();
            fft2(&mut data, self.grid.n(), false);
            data.into()
        })
    }

    fn from_spectrum(grid: GridSpec, mut data: Vec<Complex64>) -> Self {
        fft2(&mut data, grid.n(), true);
        let scale = 1.0 / grid.len() as f64;
        Self::from_vec_unchecked(grid, data.iter().map(|c| c.re * scale).collect())
    }

    /// Multiplies DFT bin `(m1, m2)` by the real factor `symbol(m1, m2)`.
    pub(crate) fn filtered(&self, symbol: impl Fn(usize, usize) -> f64) -> Self {
        let n = self.grid.n();
        let data = self
            .spectrum()
            .iter()
            .enumerate()
            .map(|(idx, c)| c * symbol(idx / n, idx % n))
            .collect();
        Self::from_spectrum(self.grid, data)
    }

    /// Spectral derivative `∂₁^a ∂₂^b` of the trigonometric interpolant.
    pub fn derivative(&self, order: [usize; 2]) -> Result<Self> {
        if order == [0, 0] {
            return Ok(self.clone());
        }
        let grid = self.grid;
        let n = grid.n();
        let f1: Vec<Complex64> = (0..n).map(|m| axis_factor(&grid, m, order[0])).collect();
        let f2: Vec<Complex64> = (0..n).map(|m| axis_factor(&grid, m, order[1])).collect();
        let data = self
            .spectrum()
            .iter()
            .enumerate()
            .map(|(idx, c)| c * f1[idx / n] * f2[idx % n])
            .collect();
        let out = Self::from_spectrum(grid, data);
        out.check_finite("derivative")?;
        Ok(out)
    }

    pub fn gradient(&self) -> Result<[PeriodicField; 2]> {
        Ok([self.derivative([1, 0])?, self.derivative([0, 1])?])
    }

    /// Second derivatives `[∂₁₁, ∂₁₂, ∂₂₂]`.
    pub fn hessian(&self) -> Result<[PeriodicField; 3]> {
        Ok([
            self.derivative([2, 0])?,
            self.derivative([1, 1])?,
            self.derivative([0, 2])?,
        ])
    }

    /// The field minus its grid average.
    pub fn mean_project(&self) -> Self {
        let m = self.mean();
        self.map(|v| v - m)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec_unchecked(self.grid, self.samples.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.grid, other.grid);
        Self::from_vec_unchecked(
            self.grid,
            self.samples
                .iter()
                .zip(&other.samples)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// Value of the trigonometric interpolant by direct Fourier summation.
    pub fn eval(&self, point: Vec2) -> f64 {
        let bundle = SpectralBundle::new(&[self]);
        let mut out = [0.0];
        bundle.eval_into(point, &mut out);
        out[0]
    }

    /// Periodic Catmull–Rom interpolation from the nearest 4×4 samples.
    ///
    /// Only third-order accurate in the grid spacing; the spectral path is the
    /// one the solvers use.
    pub fn eval_bicubic(&self, point: Vec2) -> f64 {
        let n = self.grid.n();
        let nf = n as f64;
        let wrap = |k: i64| k.rem_euclid(n as i64) as usize;
        let weights = |t: f64| {
            let t2 = t * t;
            let t3 = t2 * t;
            [
                0.5 * (-t3 + 2.0 * t2 - t),
                0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
                0.5 * (-3.0 * t3 + 4.0 * t2 + t),
                0.5 * (t3 - t2),
            ]
        };
        let s1 = point[0] * nf;
        let s2 = point[1] * nf;
        let i0 = s1.floor() as i64;
        let j0 = s2.floor() as i64;
        let w1 = weights(s1 - i0 as f64);
        let w2 = weights(s2 - j0 as f64);
        let mut acc = 0.0;
        for (a, wa) in w1.iter().enumerate() {
            let i = wrap(i0 - 1 + a as i64);
            for (b, wb) in w2.iter().enumerate() {
                let j = wrap(j0 - 1 + b as i64);
                acc += wa * wb * self.samples[i * n + j];
            }
        }
        acc
    }
}

/// Off-grid evaluator for several fields sharing one grid.
///
/// Stores the half spectrum (second axis `0..=n/2`) with Hermitian weights and
/// the `1/n²` normalization folded in, interleaved by field so one pass over
/// the modes serves every field. Entries may be derivatives of a field; these
/// are exact derivatives of its interpolant, so odd derivatives of a Nyquist
/// cosine become sines that vanish on the grid but not between nodes.
#[derive(Clone, Debug)]
pub struct SpectralBundle {
    grid: GridSpec,
    width: usize,
    coeffs: Vec<Complex64>,
    odd: Vec<[bool; 2]>,
}

/// Derivative factor for one axis; the Nyquist entry is real and multiplies
/// `cos` (even order) or `sin` (odd order) of the Nyquist phase.
fn bundle_factor(grid: &GridSpec, m: usize, order: usize) -> Complex64 {
    let w = 2.0 * PI * grid.wavenumber(m) as f64;
    if m == grid.n() / 2 {
        let sign = if matches!(order % 4, 1 | 2) { -1.0 } else { 1.0 };
        Complex64::new(sign * w.powi(order as i32), 0.0)
    } else {
        Complex64::new(0.0, w).powu(order as u32)
    }
}

impl SpectralBundle {
    pub const MAX_WIDTH: usize = 16;

    pub fn new(fields: &[&PeriodicField]) -> Self {
        let entries: Vec<(&PeriodicField, [usize; 2])> = fields.iter().map(|f| (*f, [0, 0])).collect();
        Self::with_derivatives(&entries)
    }

    /// Bundle of `∂₁^a ∂₂^b field` for each `(field, [a, b])`.
    pub fn with_derivatives(entries: &[(&PeriodicField, [usize; 2])]) -> Self {
        assert!(!entries.is_empty() && entries.len() <= Self::MAX_WIDTH);
        let grid = entries[0].0.grid();
        let n = grid.n();
        let half = n / 2;
        let width = entries.len();
        let norm = 1.0 / grid.len() as f64;
        let mut coeffs = vec![Complex64::new(0.0, 0.0); n * (half + 1) * width];
        for (f, (field, order)) in entries.iter().enumerate() {
            assert_eq!(field.grid(), grid, "bundle fields must share a grid");
            let spec = field.spectrum();
            for m1 in 0..n {
                let d1 = bundle_factor(&grid, m1, order[0]);
                for m2 in 0..=half {
                    let w = if m2 == 0 || m2 == half { 1.0 } else { 2.0 };
                    let d = d1 * bundle_factor(&grid, m2, order[1]);
                    coeffs[(m1 * (half + 1) + m2) * width + f] = spec[m1 * n + m2] * d * (w * norm);
                }
            }
        }
        let odd = entries.iter().map(|(_, o)| [o[0] % 2 == 1, o[1] % 2 == 1]).collect();
        SpectralBundle {
            grid,
            width,
            coeffs,
            odd,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    /// Writes the interpolant values of every entry at `point` into `out`.
    pub fn eval_into(&self, point: Vec2, out: &mut [f64]) {
        let n = self.grid.n();
        let half = n / 2;
        debug_assert!(out.len() >= self.width);
        if n > 128 {
            let e1: Vec<Complex64> = (0..n).map(|m| mode_weight(&self.grid, m, point[0])).collect();
            let e2: Vec<Complex64> = (0..=half).map(|m| mode_weight(&self.grid, m, point[1])).collect();
            return self.accumulate(&e1, &e2, point, out);
        }
        let mut e1 = [Complex64::new(0.0, 0.0); 128];
        let mut e2 = [Complex64::new(0.0, 0.0); 65];
        for (m, e) in e1[..n].iter_mut().enumerate() {
            *e = mode_weight(&self.grid, m, point[0]);
        }
        for (m, e) in e2[..=half].iter_mut().enumerate() {
            *e = mode_weight(&self.grid, m, point[1]);
        }
        self.accumulate(&e1[..n], &e2[..=half], point, out);
    }

    fn accumulate(&self, e1: &[Complex64], e2: &[Complex64], point: Vec2, out: &mut [f64]) {
        let n = self.grid.n();
        let half = n / 2;
        let width = self.width;
        let nyq_sin = |x: f64| (2.0 * PI * (half as f64 * x).rem_euclid(1.0)).sin();
        let (s1, s2) = (nyq_sin(point[0]), nyq_sin(point[1]));
        let (c1, c2) = (e1[half].re, e2[half].re);
        let mut acc = [Complex64::new(0.0, 0.0); Self::MAX_WIDTH];
        let mut total = [0.0_f64; Self::MAX_WIDTH];
        for (m1, w1) in e1.iter().enumerate() {
            acc[..width].iter_mut().for_each(|a| *a = Complex64::new(0.0, 0.0));
            let row = &self.coeffs[m1 * (half + 1) * width..(m1 + 1) * (half + 1) * width];
            for (m2, w2) in e2[..half].iter().enumerate() {
                let block = &row[m2 * width..(m2 + 1) * width];
                for (a, c) in acc[..width].iter_mut().zip(block) {
                    *a += c * w2;
                }
            }
            let block = &row[half * width..(half + 1) * width];
            for f in 0..width {
                let w = if self.odd[f][1] { s2 } else { c2 };
                acc[f] += block[f] * w;
            }
            for f in 0..width {
                let w = if m1 == half {
                    Complex64::new(if self.odd[f][0] { s1 } else { c1 }, 0.0)
                } else {
                    *w1
                };
                total[f] += w.re * acc[f].re - w.im * acc[f].im;
            }
        }
        out[..width].copy_from_slice(&total[..width]);
    }
}

fn mode_weight(grid: &GridSpec, m: usize, x: f64) -> Complex64 {
    let n = grid.n();
    let k = grid.wavenumber(m);
    let phase = 2.0 * PI * (k as f64 * x).rem_euclid(1.0);
    if m == n / 2 {
        Complex64::new(phase.cos(), 0.0)
    } else {
        let (s, c) = phase.sin_cos();
        Complex64::new(c, s)
    }
}

/// Pair of fields interpreted as a vector field.
pub type VectorField = [PeriodicField; 2];

/// A 2×2 matrix at every grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixField {
    pub m11: PeriodicField,
    pub m12: PeriodicField,
    pub m21: PeriodicField,
    pub m22: PeriodicField,
}

impl MatrixField {
    pub fn from_fn(grid: GridSpec, f: impl Fn(usize) -> Mat2) -> Self {
        let mats: Vec<Mat2> = (0..grid.len()).map(f).collect();
        Self::from_mats(grid, &mats)
    }

    pub fn from_mats(grid: GridSpec, mats: &[Mat2]) -> Self {
        let entry = |i: usize, j: usize| {
            PeriodicField::from_vec_unchecked(grid, mats.iter().map(|m| m.0[i][j]).collect())
        };
        MatrixField {
            m11: entry(0, 0),
            m12: entry(0, 1),
            m21: entry(1, 0),
            m22: entry(1, 1),
        }
    }

    pub fn identity(grid: GridSpec) -> Self {
        Self::from_fn(grid, |_| crate::linalg::IDENTITY)
    }

    pub fn grid(&self) -> GridSpec {
        self.m11.grid()
    }

    pub fn at(&self, idx: usize) -> Mat2 {
        Mat2::new(
            self.m11.samples[idx],
            self.m12.samples[idx],
            self.m21.samples[idx],
            self.m22.samples[idx],
        )
    }

    pub fn mats(&self) -> Vec<Mat2> {
        (0..self.grid().len()).map(|idx| self.at(idx)).collect()
    }

    /// Pointwise determinant.
    pub fn det(&self) -> PeriodicField {
        let grid = self.grid();
        PeriodicField::from_vec_unchecked(grid, (0..grid.len()).map(|i| self.at(i).det()).collect())
    }

    /// Pointwise smallest eigenvalue of the symmetric part.
    pub fn sym_min_eig(&self) -> PeriodicField {
        let grid = self.grid();
        PeriodicField::from_vec_unchecked(
            grid,
            (0..grid.len()).map(|i| self.at(i).sym_min_eig()).collect(),
        )
    }

    /// Largest pointwise spectral norm.
    pub fn sup_norm(&self) -> f64 {
        (0..self.grid().len()).fold(0.0_f64, |m, i| m.max(self.at(i).norm2()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> GridSpec {
        GridSpec::new(n).unwrap()
    }

    /// Deterministic band-limited field with modes |k| <= kmax.
    fn banded(g: GridSpec, kmax: i64, seed: u64) -> PeriodicField {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut modes = Vec::new();
        for k1 in -kmax..=kmax {
            for k2 in -kmax..=kmax {
                modes.push((k1, k2, next(), next()));
            }
        }
        PeriodicField::from_fn(g, |x| {
            modes
                .iter()
                .map(|&(k1, k2, a, b)| {
                    let ph = 2.0 * PI * (k1 as f64 * x[0] + k2 as f64 * x[1]);
                    a * ph.cos() + b * ph.sin()
                })
                .sum()
        })
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(6).is_err());
        assert!(GridSpec::new(9).is_err());
        assert_eq!(grid(8).len(), 64);
        assert_eq!(grid(8).wavenumber(4), 4);
        assert_eq!(grid(8).wavenumber(5), -3);
    }

    #[test]
    fn rejects_non_finite_samples() {
        let mut s = vec![0.0; 64];
        s[5] = f64::NAN;
        assert!(matches!(
            PeriodicField::new(grid(8), s),
            Err(SgError::NonFiniteField { index: 5, .. })
        ));
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        let f = PeriodicField::constant(grid(16), 3.7);
        assert!(f.derivative([1, 0]).unwrap().sup_norm() < 1e-14);
    }

    #[test]
    fn derivative_of_sine() {
        let g = grid(16);
        let f = PeriodicField::from_fn(g, |x| (2.0 * PI * x[0]).sin());
        let d = f.derivative([1, 0]).unwrap();
        assert!((d.at(0, 0) - 2.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn spectral_derivative_matches_sixth_order_differences() {
        // 6th-order centered stencil applied to the interpolant with a fine
        // step; on-grid spacing 1/64 would leave truncation error above 1e-8.
        let g = grid(64);
        let f = banded(g, 3, 7);
        let h = 1e-3;
        let c = [(-3.0, -1.0 / 60.0), (-2.0, 3.0 / 20.0), (-1.0, -3.0 / 4.0), (1.0, 3.0 / 4.0), (2.0, -3.0 / 20.0), (3.0, 1.0 / 60.0)];
        let d = f.derivative([1, 0]).unwrap();
        let mut worst = 0.0_f64;
        for idx in (0..g.len()).step_by(3) {
            let x = g.point(idx);
            let fd: f64 = c.iter().map(|&(s, w)| w * f.eval([x[0] + s * h, x[1]])).sum::<f64>() / h;
            worst = worst.max((fd - d.samples()[idx]).abs());
        }
        assert!(worst <= 1e-8, "worst = {worst}");
    }

    #[test]
    fn first_derivative_has_zero_mean() {
        let f = banded(grid(32), 5, 3);
        assert!(f.derivative([1, 0]).unwrap().mean().abs() < 1e-12);
        assert!(f.derivative([0, 1]).unwrap().mean().abs() < 1e-12);
    }

    #[test]
    fn mean_projection() {
        let g = grid(16);
        assert!(PeriodicField::constant(g, 5.0).mean_project().sup_norm() < 1e-15);
        let s = PeriodicField::from_fn(g, |x| (2.0 * PI * x[0]).sin());
        assert!(s.mean_project().sub(&s).sup_norm() < 1e-15);
        let shifted = s.map(|v| v + 0.25);
        let p = shifted.mean_project();
        assert!(p.mean().abs() < 1e-14);
        assert!((shifted.sub(&p).mean() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn eval_reproduces_nodes_and_known_values() {
        let g = grid(16);
        let f = banded(g, 4, 11);
        for &(i, j) in &[(0, 0), (3, 7), (15, 2)] {
            let x = [i as f64 / 16.0, j as f64 / 16.0];
            assert!((f.eval(x) - f.at(i, j)).abs() < 1e-12);
        }
        let c = PeriodicField::from_fn(g, |x| (2.0 * PI * x[1]).cos());
        assert!(c.eval([0.3, 0.25]).abs() < 1e-14);
    }

    #[test]
    fn eval_matches_brute_force_double_sum() {
        let g = grid(16);
        let f = banded(g, 7, 5);
        let n = 16usize;
        let spec = f.spectrum().clone();
        let brute = |x: Vec2| {
            let mut acc = Complex64::new(0.0, 0.0);
            for m1 in 0..n {
                for m2 in 0..n {
                    let e = |m: usize, t: f64| {
                        if m == n / 2 {
                            Complex64::new((PI * n as f64 * t).cos(), 0.0)
                        } else {
                            let k = if m < n / 2 { m as f64 } else { m as f64 - n as f64 };
                            Complex64::from_polar(1.0, 2.0 * PI * k * t)
                        }
                    };
                    acc += spec[m1 * n + m2] * e(m1, x[0]) * e(m2, x[1]);
                }
            }
            acc.re / (n * n) as f64
        };
        let mut s = 17u64;
        for _ in 0..100 {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            let a = (s >> 11) as f64 / (1u64 << 53) as f64;
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            let b = (s >> 11) as f64 / (1u64 << 53) as f64;
            assert!((f.eval([a, b]) - brute([a, b])).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_is_periodic_and_matches_analytic_band_limited() {
        let g = grid(16);
        let f = PeriodicField::from_fn(g, |x| (2.0 * PI * (2.0 * x[0] - x[1])).sin());
        let x = [0.123, 0.871];
        let exact = (2.0 * PI * (2.0 * x[0] - x[1])).sin();
        assert!((f.eval(x) - exact).abs() < 1e-13);
        assert!((f.eval([x[0] + 1.0, x[1] - 2.0]) - exact).abs() < 1e-12);
    }

    #[test]
    fn bicubic_path_is_close_but_not_exact() {
        let g = grid(32);
        let f = PeriodicField::from_fn(g, |x| (2.0 * PI * x[0]).sin());
        let x = [0.3141, 0.5];
        let err = (f.eval_bicubic(x) - (2.0 * PI * x[0]).sin()).abs();
        assert!(err < 1e-3 && err > 1e-12);
    }

    #[test]
    fn mixed_partials_commute() {
        let f = banded(grid(32), 6, 9);
        let a = f.derivative([1, 0]).unwrap().derivative([0, 1]).unwrap();
        let b = f.derivative([0, 1]).unwrap().derivative([1, 0]).unwrap();
        assert!(a.sub(&b).sup_norm() < 1e-10);
    }

    #[test]
    fn diff_matrix_matches_field_derivative() {
        let g = grid(8);
        let f = banded(g, 3, 1);
        let d1 = diff_matrix_1d(&g, 1);
        let df = f.derivative([1, 0]).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let v: f64 = (0..8).map(|k| d1[i * 8 + k] * f.at(k, j)).sum();
                assert!((v - df.at(i, j)).abs() < 1e-11);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn spectral_round_trip(seed in 0u64..1000, amp in 0.1f64..100.0) {
            let g = grid(16);
            let f = banded(g, 8, seed).scale(amp);
            let back = PeriodicField::from_spectrum(g, f.spectrum().to_vec());
            let err = back.sub(&f).sup_norm();
            proptest::prop_assert!(err <= 1e-12 * f.sup_norm().max(1.0));
        }
    }
}
