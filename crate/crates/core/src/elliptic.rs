//! Linear elliptic equations on the torus by Fourier collocation.
//!
//! Operators are held in non-divergence form
//! `L u = a₁₁∂₁₁u + 2a₁₂∂₁₂u + a₂₂∂₂₂u + b·∇u + c u`.
//! Divergence-form operators `∇·(K∇u)` can be converted with `a = sym(K)` and
//! `b_j = Σ_i ∂_i K_ij`, which keeps the Nyquist modes in play. The exact
//! spectral divergence form is [`DivergenceOperator`]; it annihilates the
//! Nyquist modes and so carries a four-dimensional kernel.
//!
//! The reference solver assembles the dense collocation matrix and factors it
//! with partially pivoted LU. With [`Gauge::MeanZero`] the system is bordered:
//! `L u + λ = r`, `Σ u = 0`. The multiplier `λ` is the part of `r` outside the
//! range of `L`; for divergence-form operators it equals `mean(r)`.

use std::sync::Once;

use faer::linalg::solvers::PartialPivLu;
use faer::prelude::*;

use crate::error::{Result, SgError};
use crate::field::{diff_matrix_1d, GridSpec, MatrixField, PeriodicField, VectorField};

/// Largest admissible solvability defect `|λ|` for mean-zero problems.
pub const COMPAT_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gauge {
    /// `c ≡ 0`, solution normalized to mean zero.
    MeanZero,
    /// `c < 0` somewhere makes the operator invertible without a gauge.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Backend {
    /// Dense LU of the collocation matrix.
    #[default]
    Dense,
    /// Restarted GMRES, preconditioned by the constant-coefficient operator
    /// with the mean coefficients.
    Krylov,
}

/// A linear elliptic problem `L u = rhs`.
#[derive(Clone, Debug)]
pub struct EllipticProblem {
    pub a: MatrixField,
    pub b: VectorField,
    pub c: PeriodicField,
    pub rhs: PeriodicField,
    pub gauge: Gauge,
}

/// Solution together with solver diagnostics.
#[derive(Clone, Debug)]
pub struct EllipticSolution {
    pub u: PeriodicField,
    /// `mean(rhs)` as supplied.
    pub rhs_mean: f64,
    /// Bordering multiplier; zero for [`Gauge::None`].
    pub multiplier: f64,
    /// `sup|L u + λ − rhs|`.
    pub residual: f64,
    /// Refinement sweeps (dense) or GMRES iterations (Krylov).
    pub iterations: usize,
}

/// Coefficients of `L`, immutable once built.
#[derive(Clone, Debug)]
pub struct EllipticOperator {
    grid: GridSpec,
    a11: PeriodicField,
    a12: PeriodicField,
    a22: PeriodicField,
    b: VectorField,
    c: PeriodicField,
    gauge: Gauge,
    ellipticity: f64,
}

fn deterministic_faer() {
    static INIT: Once = Once::new();
    INIT.call_once(|| faer::set_global_parallelism(Par::Seq));
}

impl EllipticOperator {
    pub fn new(a: &MatrixField, b: VectorField, c: PeriodicField, gauge: Gauge) -> Result<Self> {
        let grid = a.grid();
        for g in [b[0].grid(), b[1].grid(), c.grid()] {
            grid.check_same(&g)?;
        }
        for (name, f) in [
            ("a11", &a.m11),
            ("a12", &a.m12),
            ("a21", &a.m21),
            ("a22", &a.m22),
            ("b1", &b[0]),
            ("b2", &b[1]),
            ("c", &c),
        ] {
            f.check_finite(name)?;
        }
        let (ellipticity, at) = a.sym_min_eig().min_with_location();
        if ellipticity <= 0.0 {
            return Err(SgError::EllipticSingular(format!(
                "principal part not positive definite: min eigenvalue {ellipticity:.3e} at {at:?}"
            )));
        }
        let c_max = c.samples().iter().copied().fold(f64::MIN, f64::max);
        if c_max > 0.0 {
            return Err(SgError::EllipticSingular(format!(
                "zero-order coefficient must be <= 0, max is {c_max:.3e}"
            )));
        }
        match gauge {
            Gauge::MeanZero if c.sup_norm() != 0.0 => {
                return Err(SgError::EllipticSingular(
                    "mean-zero gauge requires c = 0".to_string(),
                ))
            }
            Gauge::None if c_max == 0.0 && c.min() == 0.0 => {
                return Err(SgError::EllipticSingular(
                    "c = 0 without a gauge leaves constants in the kernel".to_string(),
                ))
            }
            _ => {}
        }
        let a12 = a.m12.add(&a.m21).scale(0.5);
        Ok(EllipticOperator {
            grid,
            a11: a.m11.clone(),
            a12,
            a22: a.m22.clone(),
            b,
            c,
            gauge,
            ellipticity,
        })
    }

    /// `u ↦ ∇·(K∇u) + c u`.
    pub fn from_divergence(k: &MatrixField, c: PeriodicField, gauge: Gauge) -> Result<Self> {
        let b = divergence_drift(k)?;
        Self::new(k, b, c, gauge)
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn gauge(&self) -> Gauge {
        self.gauge
    }

    /// `min_x λ_min(a(x))`.
    pub fn ellipticity(&self) -> f64 {
        self.ellipticity
    }

    /// `(a₁₁, a₁₂, a₂₂)` with `a₁₂` symmetrized.
    pub fn principal(&self) -> [&PeriodicField; 3] {
        [&self.a11, &self.a12, &self.a22]
    }

    pub fn drift(&self) -> &VectorField {
        &self.b
    }

    pub fn zero_order(&self) -> &PeriodicField {
        &self.c
    }

    /// `L u`, matrix-free.
    pub fn apply(&self, u: &PeriodicField) -> Result<PeriodicField> {
        self.grid.check_same(&u.grid())?;
        let [u11, u12, u22] = u.hessian()?;
        let [u1, u2] = u.gradient()?;
        let n = self.grid.len();
        let s = |f: &PeriodicField, i: usize| f.samples()[i];
        let out: Vec<f64> = (0..n)
            .map(|i| {
                s(&self.a11, i) * s(&u11, i)
                    + 2.0 * s(&self.a12, i) * s(&u12, i)
                    + s(&self.a22, i) * s(&u22, i)
                    + s(&self.b[0], i) * s(&u1, i)
                    + s(&self.b[1], i) * s(&u2, i)
                    + s(&self.c, i) * s(u, i)
            })
            .collect();
        PeriodicField::new(self.grid, out)
    }

    fn bordered(&self) -> bool {
        self.gauge == Gauge::MeanZero
    }

    fn size(&self) -> usize {
        self.grid.len() + usize::from(self.bordered())
    }

    /// Dense collocation matrix, bordered for the mean-zero gauge.
    pub fn assemble(&self) -> Mat<f64> {
        let n = self.grid.n();
        let len = self.grid.len();
        let d1 = diff_matrix_1d(&self.grid, 1);
        let d2 = diff_matrix_1d(&self.grid, 2);
        let size = self.size();
        let mut m = Mat::<f64>::zeros(size, size);
        for i in 0..n {
            for j in 0..n {
                let r = i * n + j;
                let a11 = self.a11.samples()[r];
                let a12 = 2.0 * self.a12.samples()[r];
                let a22 = self.a22.samples()[r];
                let b1 = self.b[0].samples()[r];
                let b2 = self.b[1].samples()[r];
                for ip in 0..n {
                    m[(r, ip * n + j)] += a11 * d2[i * n + ip] + b1 * d1[i * n + ip];
                }
                for jp in 0..n {
                    m[(r, i * n + jp)] += a22 * d2[j * n + jp] + b2 * d1[j * n + jp];
                }
                if a12 != 0.0 {
                    for ip in 0..n {
                        let w = a12 * d1[i * n + ip];
                        if w == 0.0 {
                            continue;
                        }
                        for jp in 0..n {
                            m[(r, ip * n + jp)] += w * d1[j * n + jp];
                        }
                    }
                }
                m[(r, r)] += self.c.samples()[r];
                if self.bordered() {
                    m[(r, len)] = 1.0;
                    m[(len, r)] = 1.0;
                }
            }
        }
        m
    }

    /// Factors the dense collocation matrix.
    pub fn factor(&self) -> Result<DenseFactor> {
        deterministic_faer();
        let lu = self.assemble().partial_piv_lu();
        let u = lu.U();
        let diag: Vec<f64> = (0..u.nrows()).map(|i| u[(i, i)].abs()).collect();
        let max = diag.iter().copied().fold(0.0, f64::max);
        let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min.is_finite() && max.is_finite()) || min <= 1e-13 * max {
            return Err(SgError::EllipticSingular(format!(
                "collocation matrix singular: pivot ratio {:.3e}",
                min / max
            )));
        }
        Ok(DenseFactor {
            op: self.clone(),
            lu,
        })
    }

    /// `sup|L u + λ − rhs|`.
    fn residual(&self, u: &PeriodicField, lambda: f64, rhs: &PeriodicField) -> Result<f64> {
        let lu = self.apply(u)?;
        Ok(lu
            .samples()
            .iter()
            .zip(rhs.samples())
            .map(|(l, r)| (l + lambda - r).abs())
            .fold(0.0, f64::max))
    }

    fn finish(
        &self,
        mut u: PeriodicField,
        multiplier: f64,
        rhs: &PeriodicField,
        tol: f64,
        iterations: usize,
    ) -> Result<EllipticSolution> {
        if self.bordered() {
            u = u.mean_project();
        }
        let target = tol * (1.0 + rhs.sup_norm());
        // the multiplier is only resolved to the solve tolerance
        if self.bordered() && multiplier.abs() > COMPAT_TOL.max(target) {
            return Err(SgError::IncompatibleRhs {
                mean: multiplier,
                tol: COMPAT_TOL,
            });
        }
        let residual = self.residual(&u, multiplier, rhs)?;
        if !(residual <= target) {
            return Err(SgError::EllipticSingular(format!(
                "residual {residual:.3e} above {target:.3e}"
            )));
        }
        Ok(EllipticSolution {
            u,
            rhs_mean: rhs.mean(),
            multiplier,
            residual,
            iterations,
        })
    }

    fn check_rhs(&self, rhs: &PeriodicField) -> Result<()> {
        self.grid.check_same(&rhs.grid())?;
        rhs.check_finite("rhs")
    }

    /// Solves by restarted GMRES on the (bordered) collocation system.
    pub fn solve_krylov(&self, rhs: &PeriodicField, tol: f64) -> Result<EllipticSolution> {
        self.check_rhs(rhs)?;
        let len = self.grid.len();
        let size = self.size();
        let mut b = rhs.samples().to_vec();
        if self.bordered() {
            b.push(0.0);
        }
        let target = tol * (1.0 + rhs.sup_norm());
        let precond = |v: &[f64]| self.precondition(v);
        let matvec = |v: &[f64]| self.apply_vec(v);
        let (x, iterations) = gmres(&matvec, &precond, &b, 0.25 * target, 60, 50)?;
        debug_assert_eq!(x.len(), size);
        let multiplier = if self.bordered() { x[len] } else { 0.0 };
        let u = PeriodicField::new(self.grid, x[..len].to_vec())?;
        self.finish(u, multiplier, rhs, tol, iterations)
    }

    fn apply_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let len = self.grid.len();
        let u = PeriodicField::new(self.grid, v[..len].to_vec())?;
        let mut out = self.apply(&u)?.into_samples();
        if self.bordered() {
            let lambda = v[len];
            out.iter_mut().for_each(|o| *o += lambda);
            out.push(v[..len].iter().sum());
        }
        Ok(out)
    }

    /// Exact inverse of the bordered constant-coefficient operator.
    fn precondition(&self, v: &[f64]) -> Result<Vec<f64>> {
        let len = self.grid.len();
        let n = self.grid.n();
        let grid = self.grid;
        let (a11, a12, a22, c) = (
            self.a11.mean(),
            self.a12.mean(),
            self.a22.mean(),
            self.c.mean(),
        );
        let r = PeriodicField::new(grid, v[..len].to_vec())?;
        let lambda = if self.bordered() { r.mean() } else { 0.0 };
        let tp = 2.0 * std::f64::consts::PI;
        let u = r.filtered(|m1, m2| {
            let k1 = tp * grid.wavenumber(m1) as f64;
            let k2 = tp * grid.wavenumber(m2) as f64;
            let mixed = if m1 == n / 2 || m2 == n / 2 { 0.0 } else { k1 * k2 };
            let sym = -(a11 * k1 * k1 + 2.0 * a12 * mixed + a22 * k2 * k2) + c;
            if sym == 0.0 {
                0.0
            } else {
                1.0 / sym
            }
        });
        let mut out = u.into_samples();
        if self.bordered() {
            let shift = v[len] / len as f64;
            out.iter_mut().for_each(|o| *o += shift);
            out.push(lambda);
        }
        Ok(out)
    }
}

/// LU factorization of a collocation matrix, reusable across right-hand sides.
pub struct DenseFactor {
    op: EllipticOperator,
    lu: PartialPivLu<f64>,
}

impl DenseFactor {
    pub fn operator(&self) -> &EllipticOperator {
        &self.op
    }

    fn raw_solve(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
        self.lu.solve_in_place(rhs.as_mut());
        (0..b.len()).map(|i| rhs[(i, 0)]).collect()
    }

    /// Solves `L u (+ λ) = rhs`, with up to three sweeps of iterative
    /// refinement if the first solve misses the residual target.
    pub fn solve(&self, rhs: &PeriodicField, tol: f64) -> Result<EllipticSolution> {
        let op = &self.op;
        op.check_rhs(rhs)?;
        let len = op.grid.len();
        let mut b = rhs.samples().to_vec();
        if op.bordered() {
            b.push(0.0);
        }
        let mut x = self.raw_solve(&b);
        let target = tol * (1.0 + rhs.sup_norm());
        let mut sweeps = 0;
        loop {
            let ax = op.apply_vec(&x)?;
            let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let res = r[..len].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if res <= 0.5 * target || sweeps == 3 {
                break;
            }
            let dx = self.raw_solve(&r);
            x.iter_mut().zip(&dx).for_each(|(x, d)| *x += d);
            sweeps += 1;
        }
        let multiplier = if op.bordered() { x[len] } else { 0.0 };
        let u = PeriodicField::new(op.grid, x[..len].to_vec())?;
        op.finish(u, multiplier, rhs, tol, sweeps)
    }
}

/// `b_j = Σ_i ∂_i K_ij`, the first-order part of `∇·(K∇u)`.
pub fn divergence_drift(k: &MatrixField) -> Result<VectorField> {
    let d1 = |f: &PeriodicField| f.derivative([1, 0]);
    let d2 = |f: &PeriodicField| f.derivative([0, 1]);
    Ok([d1(&k.m11)?.add(&d2(&k.m21)?), d1(&k.m12)?.add(&d2(&k.m22)?)])
}

/// `∇·F` by spectral differentiation.
pub fn divergence(flux: &VectorField) -> Result<PeriodicField> {
    Ok(flux[0].derivative([1, 0])?.add(&flux[1].derivative([0, 1])?))
}

/// `∇·(K∇u)` with both derivatives taken spectrally.
pub fn apply_divform(k: &MatrixField, u: &PeriodicField) -> Result<PeriodicField> {
    let [u1, u2] = u.gradient()?;
    let f1 = k.m11.mul(&u1).add(&k.m12.mul(&u2));
    let f2 = k.m21.mul(&u1).add(&k.m22.mul(&u2));
    divergence(&[f1, f2])
}

/// Solves `problem` with the dense reference solver.
pub fn solve(problem: &EllipticProblem, tol: f64) -> Result<PeriodicField> {
    Ok(solve_with(problem, tol, Backend::Dense)?.u)
}

pub fn solve_with(problem: &EllipticProblem, tol: f64, backend: Backend) -> Result<EllipticSolution> {
    let op = EllipticOperator::new(&problem.a, problem.b.clone(), problem.c.clone(), problem.gauge)?;
    match backend {
        Backend::Dense => op.factor()?.solve(&problem.rhs, tol),
        Backend::Krylov => op.solve_krylov(&problem.rhs, tol),
    }
}

/// `∇·(K∇u) + c·u` (constant `c ≤ 0`) discretized exactly as the spectral
/// divergence of `K` times the spectral gradient.
///
/// With `c = 0` this operator annihilates the constant and the three Nyquist
/// cosines `(−1)^i`, `(−1)^j`, `(−1)^{i+j}`. The dense system is then bordered
/// with all four, which fixes `mean(u) = 0` and zero Nyquist content in `u`.
#[derive(Clone, Debug)]
pub struct DivergenceOperator {
    k: MatrixField,
    c: f64,
    ellipticity: f64,
}

impl DivergenceOperator {
    pub fn new(k: &MatrixField) -> Result<Self> {
        for (name, f) in [("k11", &k.m11), ("k12", &k.m12), ("k21", &k.m21), ("k22", &k.m22)] {
            f.check_finite(name)?;
        }
        let (ellipticity, at) = k.sym_min_eig().min_with_location();
        if ellipticity <= 0.0 {
            return Err(SgError::EllipticSingular(format!(
                "coefficient not positive definite: min eigenvalue {ellipticity:.3e} at {at:?}"
            )));
        }
        Ok(DivergenceOperator {
            k: k.clone(),
            c: 0.0,
            ellipticity,
        })
    }

    /// `∇·(K∇u) + c·u`; `c` must be negative.
    pub fn with_zero_order(k: &MatrixField, c: f64) -> Result<Self> {
        if !(c < 0.0) {
            return Err(SgError::EllipticSingular(format!("zero-order coefficient {c} must be negative")));
        }
        Ok(DivergenceOperator { c, ..Self::new(k)? })
    }

    fn border(&self) -> usize {
        if self.c == 0.0 {
            4
        } else {
            0
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.k.grid()
    }

    pub fn ellipticity(&self) -> f64 {
        self.ellipticity
    }

    pub fn apply(&self, u: &PeriodicField) -> Result<PeriodicField> {
        let du = apply_divform(&self.k, u)?;
        Ok(if self.c == 0.0 { du } else { du.add(&u.scale(self.c)) })
    }

    fn kernel(&self) -> [Vec<f64>; 4] {
        let n = self.grid().n();
        let sign = |m: usize| if m % 2 == 0 { 1.0 } else { -1.0 };
        let build = |f: &dyn Fn(usize, usize) -> f64| {
            (0..n * n).map(|r| f(r / n, r % n)).collect::<Vec<f64>>()
        };
        [
            build(&|_, _| 1.0),
            build(&|i, _| sign(i)),
            build(&|_, j| sign(j)),
            build(&|i, j| sign(i + j)),
        ]
    }

    pub fn assemble(&self) -> Mat<f64> {
        let grid = self.grid();
        let n = grid.n();
        let len = grid.len();
        let d = diff_matrix_1d(&grid, 1);
        let k = |f: &PeriodicField, i: usize, j: usize| f.samples()[i * n + j];
        let extra = self.border();
        let mut m = Mat::<f64>::zeros(len + extra, len + extra);
        for i in 0..n {
            for j in 0..n {
                let r = i * n + j;
                for ip in 0..n {
                    // ∂₁(k₁₁∂₁u) couples (i, j) to (i', j)
                    let s: f64 = (0..n).map(|l| d[i * n + l] * k(&self.k.m11, l, j) * d[l * n + ip]).sum();
                    m[(r, ip * n + j)] += s;
                    for jp in 0..n {
                        // ∂₁(k₁₂∂₂u) + ∂₂(k₂₁∂₁u)
                        let w = d[i * n + ip] * d[j * n + jp];
                        if w != 0.0 {
                            m[(r, ip * n + jp)] += w * (k(&self.k.m12, ip, j) + k(&self.k.m21, i, jp));
                        }
                    }
                }
                for jp in 0..n {
                    let s: f64 = (0..n).map(|l| d[j * n + l] * k(&self.k.m22, i, l) * d[l * n + jp]).sum();
                    m[(r, i * n + jp)] += s;
                }
                m[(r, r)] += self.c;
            }
        }
        if extra == 0 {
            return m;
        }
        for (c, v) in self.kernel().iter().enumerate() {
            for (r, &x) in v.iter().enumerate() {
                m[(r, len + c)] = x;
                m[(len + c, r)] = x;
            }
        }
        m
    }

    /// Solves `∇·(K∇u) + c·u = rhs`. For `c = 0` the mean of `rhs` must
    /// vanish to within [`COMPAT_TOL`]; Nyquist-cosine content of `rhs` is
    /// projected out and reported nowhere, since spectral divergences never
    /// contain it.
    pub fn solve(&self, rhs: &PeriodicField, tol: f64) -> Result<EllipticSolution> {
        deterministic_faer();
        let grid = self.grid();
        grid.check_same(&rhs.grid())?;
        rhs.check_finite("rhs")?;
        let len = grid.len();
        let extra = self.border();
        let lu = self.assemble().partial_piv_lu();
        let mut b = Mat::<f64>::from_fn(len + extra, 1, |i, _| if i < len { rhs.samples()[i] } else { 0.0 });
        lu.solve_in_place(b.as_mut());
        if b.col(0).iter().any(|v| !v.is_finite()) {
            return Err(SgError::EllipticSingular("non-finite divergence-form solution".to_string()));
        }
        let multiplier = if extra > 0 { b[(len, 0)] } else { 0.0 };
        if multiplier.abs() > COMPAT_TOL {
            return Err(SgError::IncompatibleRhs {
                mean: multiplier,
                tol: COMPAT_TOL,
            });
        }
        let mut u = PeriodicField::new(grid, (0..len).map(|i| b[(i, 0)]).collect())?;
        if extra > 0 {
            u = u.mean_project();
        }
        let residual = self.apply(&u)?.sub(rhs).sup_norm();
        let target = tol * (1.0 + rhs.sup_norm());
        if !(residual <= target) {
            return Err(SgError::EllipticSingular(format!(
                "divergence-form residual {residual:.3e} above {target:.3e}"
            )));
        }
        Ok(EllipticSolution {
            u,
            rhs_mean: rhs.mean(),
            multiplier,
            residual,
            iterations: 0,
        })
    }
}

impl DivergenceOperator {
    /// Preconditioned GMRES counterpart of [`DivergenceOperator::solve`]. The
    /// returned residual honors `tol` rather than sitting at round-off.
    pub fn solve_krylov(&self, rhs: &PeriodicField, tol: f64) -> Result<EllipticSolution> {
        let grid = self.grid();
        grid.check_same(&rhs.grid())?;
        rhs.check_finite("rhs")?;
        let n = grid.n();
        let singular = self.c == 0.0;
        if singular && rhs.mean().abs() > COMPAT_TOL {
            return Err(SgError::IncompatibleRhs {
                mean: rhs.mean(),
                tol: COMPAT_TOL,
            });
        }
        let in_kernel = |m1: usize, m2: usize| (m1 == 0 || m1 == n / 2) && (m2 == 0 || m2 == n / 2);
        let b = if singular {
            rhs.filtered(|m1, m2| if in_kernel(m1, m2) { 0.0 } else { 1.0 })
        } else {
            rhs.clone()
        };
        let (a11, a12, a22) = (
            self.k.m11.mean(),
            0.5 * (self.k.m12.mean() + self.k.m21.mean()),
            self.k.m22.mean(),
        );
        let tp = 2.0 * std::f64::consts::PI;
        let wave = |m: usize| if m == n / 2 { 0.0 } else { tp * grid.wavenumber(m) as f64 };
        let c = self.c;
        let precond = |v: &[f64]| -> Result<Vec<f64>> {
            let r = PeriodicField::new(grid, v.to_vec())?;
            Ok(r.filtered(|m1, m2| {
                let (k1, k2) = (wave(m1), wave(m2));
                let sym = -(a11 * k1 * k1 + 2.0 * a12 * k1 * k2 + a22 * k2 * k2) + c;
                if sym == 0.0 {
                    0.0
                } else {
                    1.0 / sym
                }
            })
            .into_samples())
        };
        let matvec = |v: &[f64]| -> Result<Vec<f64>> {
            Ok(self.apply(&PeriodicField::new(grid, v.to_vec())?)?.into_samples())
        };
        let target = tol * (1.0 + rhs.sup_norm());
        let (x, iterations) = gmres(&matvec, &precond, b.samples(), 0.25 * target, 60, 50)?;
        let mut u = PeriodicField::new(grid, x)?;
        if singular {
            u = u.mean_project();
        }
        let residual = self.apply(&u)?.sub(&b).sup_norm();
        if !(residual <= target) {
            return Err(SgError::EllipticSingular(format!(
                "divergence-form residual {residual:.3e} above {target:.3e}"
            )));
        }
        Ok(EllipticSolution {
            u,
            rhs_mean: rhs.mean(),
            multiplier: 0.0,
            residual,
            iterations,
        })
    }
}

/// Mean-zero `u` with `∇·(K∇u) = ∇·flux`.
pub fn solve_divform(k: &MatrixField, flux: &VectorField, tol: f64) -> Result<PeriodicField> {
    Ok(solve_divform_detailed(k, flux, tol)?.u)
}

pub fn solve_divform_detailed(k: &MatrixField, flux: &VectorField, tol: f64) -> Result<EllipticSolution> {
    DivergenceOperator::new(k)?.solve(&divergence(flux)?, tol)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Right-preconditioned restarted GMRES. Stops once the sup norm of the true
/// residual is at most `target`.
fn gmres(
    matvec: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    precond: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    target: f64,
    restart: usize,
    max_cycles: usize,
) -> Result<(Vec<f64>, usize)> {
    let size = b.len();
    let mut x = vec![0.0; size];
    let mut total = 0;
    for _ in 0..max_cycles {
        let ax = matvec(&x)?;
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        if r.iter().fold(0.0_f64, |m, v| m.max(v.abs())) <= target {
            return Ok((x, total));
        }
        let beta = dot(&r, &r).sqrt();
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|x| x / beta).collect()];
        let mut z: Vec<Vec<f64>> = Vec::new();
        let mut h = vec![vec![0.0; restart]; restart + 1];
        let (mut cs, mut sn) = (vec![0.0; restart], vec![0.0; restart]);
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..restart {
            let zk = precond(&v[k])?;
            let mut w = matvec(&zk)?;
            z.push(zk);
            for (i, vi) in v.iter().enumerate() {
                let hik = dot(&w, vi);
                h[i][k] = hik;
                w.iter_mut().zip(vi).for_each(|(w, v)| *w -= hik * v);
            }
            let norm = dot(&w, &w).sqrt();
            h[k + 1][k] = norm;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let denom = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if denom == 0.0 {
                return Err(SgError::EllipticSingular("GMRES breakdown".to_string()));
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            total += 1;
            // the 2-norm bounds the sup norm
            if g[k + 1].abs() <= 0.5 * target || norm == 0.0 {
                break;
            }
            v.push(w.iter().map(|x| x / norm).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let s: f64 = (i + 1..k_used).map(|j| h[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        for (yi, zi) in y.iter().zip(&z) {
            x.iter_mut().zip(zi).for_each(|(x, z)| *x += yi * z);
        }
    }
    let ax = matvec(&x)?;
    let res = b
        .iter()
        .zip(&ax)
        .fold(0.0_f64, |m, (b, a)| m.max((b - a).abs()));
    if res <= target {
        Ok((x, total))
    } else {
        Err(SgError::EllipticSingular(format!(
            "GMRES stalled at residual {res:.3e} after {total} iterations"
        )))
    }
}
