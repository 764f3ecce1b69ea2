//! Per-point solves of `Q̂(x, z) = 0` for the backward map `z = F⁻¹(x)` and the
//! forward map `x = F(y)`.
//!
//! `Q̂(x, z) = x + f⁻¹(x) f⁻¹(z) ∇q(x) − z − f⁻²(z) R(f(z)·dt) ∇p(z)`.
//!
//! All z-dependent Coriolis factors come from the one interpolant of `f⁻¹`:
//! `f⁻² = (f⁻¹)²` and `f = 1/f⁻¹` pointwise.

use std::sync::Arc;

use rayon::prelude::*;

use crate::coriolis::CoriolisContext;
use crate::error::{Result, SgError};
use crate::field::{GridSpec, MatrixField, PeriodicField, SpectralBundle, VectorField};
use crate::linalg::{rotation, vadd, vsub, Mat2, Vec2, IDENTITY, J};
use crate::map::{damped_newton, NewtonOutcome, PeriodicMap};

/// Newton controls for the per-point map solves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapSolveParams {
    pub tol: f64,
    pub max_iter: usize,
    /// Lower bound on the smallest eigenvalue of the symmetric part of the
    /// Newton matrix at every solution.
    pub guard_c0: f64,
}

impl Default for MapSolveParams {
    fn default() -> Self {
        MapSolveParams {
            tol: 1e-12,
            max_iter: 50,
            guard_c0: 0.25,
        }
    }
}

impl MapSolveParams {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.tol > 0.0) {
            errs.push(format!("map tol must be > 0, got {}", self.tol));
        }
        if self.max_iter == 0 {
            errs.push("map max_iter must be >= 1".to_string());
        }
        if !(self.guard_c0 > 0.0) {
            errs.push(format!("guard_c0 must be > 0, got {}", self.guard_c0));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SgError::ConfigInvalid(errs))
        }
    }
}

/// Maximum number of step halvings in the damped Newton solves.
pub const MAX_HALVINGS: usize = 8;

/// Everything `Q̂` needs for one step: previous field `p`, candidate `q`,
/// their spectral derivatives, and off-grid evaluators.
#[derive(Clone, Debug)]
pub struct StepContext {
    pub coriolis: Arc<CoriolisContext>,
    pub p: PeriodicField,
    pub q: PeriodicField,
    pub dt: f64,
    pub grad_p: VectorField,
    pub grad_q: VectorField,
    pub hess_p: MatrixField,
    pub hess_q: MatrixField,
    /// `[f⁻¹, ∂₁f⁻¹, ∂₂f⁻¹, ∂₁p, ∂₂p, ∂₁₁p, ∂₁₂p, ∂₂₂p, p]`.
    z_bundle: Arc<SpectralBundle>,
    /// `[f⁻¹, ∂₁f⁻¹, ∂₂f⁻¹, ∂₁q, ∂₂q, ∂₁₁q, ∂₁₂q, ∂₂₂q, q]`.
    x_bundle: Arc<SpectralBundle>,
}

/// Pointwise data at one location in the layout of the bundles.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PointData {
    pub fi: f64,
    pub gfi: Vec2,
    pub g: Vec2,
    pub h: Mat2,
    pub v: f64,
}

impl PointData {
    fn from_slice(b: &[f64; 9]) -> Self {
        PointData {
            fi: b[0],
            gfi: [b[1], b[2]],
            g: [b[3], b[4]],
            h: Mat2::new(b[5], b[6], b[6], b[7]),
            v: b[8],
        }
    }

    /// `I + f⁻¹∇u⊗∇f⁻¹ + f⁻²D²u` for the field `u` this data describes.
    pub fn stability(&self) -> Mat2 {
        IDENTITY + (Mat2::outer(self.g, self.gfi) + self.h.scale(self.fi)).scale(self.fi)
    }
}

fn hessian_field(field: &PeriodicField) -> Result<MatrixField> {
    let [a, b, c] = field.hessian()?;
    Ok(MatrixField {
        m11: a,
        m12: b.clone(),
        m21: b,
        m22: c,
    })
}

fn bundle_for(cor: &CoriolisContext, value: &PeriodicField) -> SpectralBundle {
    let fi = &cor.f_inv;
    SpectralBundle::with_derivatives(&[
        (fi, [0, 0]),
        (fi, [1, 0]),
        (fi, [0, 1]),
        (value, [1, 0]),
        (value, [0, 1]),
        (value, [2, 0]),
        (value, [1, 1]),
        (value, [0, 2]),
        (value, [0, 0]),
    ])
}

impl StepContext {
    pub fn new(
        coriolis: Arc<CoriolisContext>,
        p: PeriodicField,
        q: PeriodicField,
        dt: f64,
    ) -> Result<Self> {
        let grid = coriolis.grid();
        grid.check_same(&p.grid())?;
        grid.check_same(&q.grid())?;
        p.check_finite("p")?;
        q.check_finite("q")?;
        let grad_p = p.gradient()?;
        let hess_p = hessian_field(&p)?;
        let z_bundle = Arc::new(bundle_for(&coriolis, &p));
        let mut ctx = StepContext {
            coriolis,
            grad_q: grad_p.clone(),
            hess_q: hess_p.clone(),
            x_bundle: z_bundle.clone(),
            p: p.clone(),
            q: p,
            dt,
            grad_p,
            hess_p,
            z_bundle,
        };
        ctx.set_q(q)?;
        Ok(ctx)
    }

    /// Same `p`, `dt`, `f` with a new candidate `q`; reuses the `p` caches.
    pub fn with_q(&self, q: PeriodicField) -> Result<Self> {
        let mut ctx = self.clone();
        ctx.set_q(q)?;
        Ok(ctx)
    }

    fn set_q(&mut self, q: PeriodicField) -> Result<()> {
        self.grid().check_same(&q.grid())?;
        q.check_finite("q")?;
        if q == self.p {
            self.grad_q = self.grad_p.clone();
            self.hess_q = self.hess_p.clone();
            self.x_bundle = self.z_bundle.clone();
        } else {
            self.grad_q = q.gradient()?;
            self.hess_q = hessian_field(&q)?;
            self.x_bundle = Arc::new(bundle_for(&self.coriolis, &q));
        }
        self.q = q;
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        self.p.grid()
    }

    pub(crate) fn z_data(&self, z: Vec2) -> PointData {
        let mut b = [0.0; 9];
        self.z_bundle.eval_into(z, &mut b);
        PointData::from_slice(&b)
    }

    pub(crate) fn x_data(&self, x: Vec2) -> PointData {
        let mut b = [0.0; 9];
        self.x_bundle.eval_into(x, &mut b);
        PointData::from_slice(&b)
    }

    /// Exact node values of the `p`-side data.
    pub(crate) fn z_node(&self, idx: usize) -> PointData {
        let c = &self.coriolis;
        PointData {
            fi: c.f_inv.samples()[idx],
            gfi: [c.grad_f_inv[0].samples()[idx], c.grad_f_inv[1].samples()[idx]],
            g: [self.grad_p[0].samples()[idx], self.grad_p[1].samples()[idx]],
            h: self.hess_p.at(idx),
            v: self.p.samples()[idx],
        }
    }

    /// Exact node values of the `q`-side data.
    pub(crate) fn x_node(&self, idx: usize) -> PointData {
        let c = &self.coriolis;
        PointData {
            fi: c.f_inv.samples()[idx],
            gfi: [c.grad_f_inv[0].samples()[idx], c.grad_f_inv[1].samples()[idx]],
            g: [self.grad_q[0].samples()[idx], self.grad_q[1].samples()[idx]],
            h: self.hess_q.at(idx),
            v: self.q.samples()[idx],
        }
    }
}

/// `f⁻²R(f·dt)∇p` at `z`, from `p`-side data.
pub(crate) fn rotated_term(zd: &PointData, dt: f64) -> Vec2 {
    let r = rotation(dt / zd.fi);
    r.mul_vec(zd.g).map(|v| v * zd.fi * zd.fi)
}

pub(crate) fn qhat_parts(x: Vec2, z: Vec2, xd: &PointData, zd: &PointData, dt: f64) -> Vec2 {
    let s = xd.fi * zd.fi;
    let a = vadd(x, [s * xd.g[0], s * xd.g[1]]);
    vsub(vsub(a, z), rotated_term(zd, dt))
}

/// `D[f⁻²R(f·dt)∇p]` at `z`.
pub(crate) fn rotated_jacobian(zd: &PointData, dt: f64) -> Mat2 {
    let fi = zd.fi;
    let r = rotation(dt / fi);
    let rg = r.mul_vec(zd.g);
    // R∇p ⊗ 2f⁻¹∇f⁻¹ − dt·JR∇p ⊗ ∇f⁻¹ + f⁻²R D²p, using ∇(dt/f⁻¹) = −dt∇f⁻¹/f⁻²
    Mat2::outer(rg, zd.gfi).scale(2.0 * fi) - Mat2::outer(J.mul_vec(rg), zd.gfi).scale(dt)
        + (r * zd.h).scale(fi * fi)
}

/// `∂_z Q̂`.
pub(crate) fn qhat_dz_parts(xd: &PointData, zd: &PointData, dt: f64) -> Mat2 {
    Mat2::outer(xd.g, zd.gfi).scale(xd.fi) - IDENTITY - rotated_jacobian(zd, dt)
}

/// `∂_x Q̂`.
pub(crate) fn qhat_dx_parts(xd: &PointData, zd: &PointData) -> Mat2 {
    IDENTITY + (Mat2::outer(xd.g, xd.gfi) + xd.h.scale(xd.fi)).scale(zd.fi)
}

/// `Q̂(x, z)` with all factors interpolated off-grid.
pub fn qhat(x: Vec2, z: Vec2, ctx: &StepContext) -> Vec2 {
    qhat_parts(x, z, &ctx.x_data(x), &ctx.z_data(z), ctx.dt)
}

/// Analytic Jacobian of `Q̂` in its second argument.
pub fn qhat_dz(x: Vec2, z: Vec2, ctx: &StepContext) -> Mat2 {
    qhat_dz_parts(&ctx.x_data(x), &ctx.z_data(z), ctx.dt)
}

/// Analytic Jacobian of `Q̂` in its first argument.
pub fn qhat_dx(x: Vec2, z: Vec2, ctx: &StepContext) -> Mat2 {
    qhat_dx_parts(&ctx.x_data(x), &ctx.z_data(z))
}

enum PointFailure {
    Newton { iterations: usize, residual: f64 },
    Certificate { eig: f64 },
}

fn collect_map(
    grid: GridSpec,
    guard: f64,
    results: Vec<std::result::Result<Vec2, PointFailure>>,
) -> Result<PeriodicMap> {
    let mut disp = Vec::with_capacity(grid.len());
    for (idx, r) in results.into_iter().enumerate() {
        match r {
            Ok(d) => disp.push(d),
            Err(PointFailure::Newton {
                iterations,
                residual,
            }) => {
                return Err(SgError::MapSolveFailed {
                    point: grid.coords(idx),
                    iterations,
                    residual,
                })
            }
            Err(PointFailure::Certificate { eig }) => {
                return Err(SgError::ContractionLost {
                    point: grid.coords(idx),
                    eig,
                    guard,
                })
            }
        }
    }
    Ok(PeriodicMap::from_displacement_samples(grid, &disp).mark_certified())
}

/// Backward map `z = id + w` solving `Q̂(x, z(x)) = 0` at every node, Newton
/// started from `z = x`.
pub fn solve_backward(ctx: &StepContext, params: &MapSolveParams) -> Result<PeriodicMap> {
    solve_backward_from(ctx, params, None)
}

/// As [`solve_backward`], optionally warm-started from a previous map.
pub fn solve_backward_from(
    ctx: &StepContext,
    params: &MapSolveParams,
    guess: Option<&PeriodicMap>,
) -> Result<PeriodicMap> {
    params.validate()?;
    let grid = ctx.grid();
    if let Some(g) = guess {
        grid.check_same(&g.grid())?;
    }
    let results: Vec<_> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let x = grid.point(idx);
            let xd = ctx.x_node(idx);
            let z0 = guess.map_or(x, |g| g.node_image(idx));
            let outcome = damped_newton(z0, params.tol, params.max_iter, MAX_HALVINGS, |z| {
                let zd = ctx.z_data(z);
                let jac = qhat_dz_parts(&xd, &zd, ctx.dt);
                (qhat_parts(x, z, &xd, &zd, ctx.dt), jac)
            });
            match outcome {
                NewtonOutcome::Converged { x: z } => {
                    let zd = ctx.z_data(z);
                    let eig = (-qhat_dz_parts(&xd, &zd, ctx.dt)).sym_min_eig();
                    if eig < params.guard_c0 {
                        Err(PointFailure::Certificate { eig })
                    } else {
                        Ok(vsub(z, x))
                    }
                }
                NewtonOutcome::Failed {
                    iterations,
                    residual,
                } => Err(PointFailure::Newton {
                    iterations,
                    residual,
                }),
            }
        })
        .collect();
    collect_map(grid, params.guard_c0, results)
}

fn forward_point(
    ctx: &StepContext,
    params: &MapSolveParams,
    y: Vec2,
    zd: &PointData,
) -> std::result::Result<Vec2, PointFailure> {
    let outcome = damped_newton(y, params.tol, params.max_iter, MAX_HALVINGS, |x| {
        let xd = ctx.x_data(x);
        (qhat_parts(x, y, &xd, zd, ctx.dt), qhat_dx_parts(&xd, zd))
    });
    match outcome {
        NewtonOutcome::Converged { x } => {
            let eig = qhat_dx_parts(&ctx.x_data(x), zd).sym_min_eig();
            if eig < params.guard_c0 {
                Err(PointFailure::Certificate { eig })
            } else {
                Ok(x)
            }
        }
        NewtonOutcome::Failed {
            iterations,
            residual,
        } => Err(PointFailure::Newton {
            iterations,
            residual,
        }),
    }
}

/// Forward map `x = F(y)` solving `Q̂(F(y), y) = 0` at every node, Newton in
/// the first argument started from `x = y`.
pub fn solve_forward(ctx: &StepContext, params: &MapSolveParams) -> Result<PeriodicMap> {
    params.validate()?;
    let grid = ctx.grid();
    let results: Vec<_> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let y = grid.point(idx);
            forward_point(ctx, params, y, &ctx.z_node(idx)).map(|x| vsub(x, y))
        })
        .collect();
    collect_map(grid, params.guard_c0, results)
}

/// `F(y)` at arbitrary points, each solved directly rather than interpolated.
/// Failures report the index into `points` as `[index, 0]`.
pub fn solve_forward_at(
    ctx: &StepContext,
    params: &MapSolveParams,
    points: &[Vec2],
) -> Result<Vec<Vec2>> {
    params.validate()?;
    let results: Vec<_> = points
        .par_iter()
        .map(|&y| forward_point(ctx, params, y, &ctx.z_data(y)))
        .collect();
    let mut out = Vec::with_capacity(points.len());
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(x) => out.push(x),
            Err(PointFailure::Newton {
                iterations,
                residual,
            }) => {
                return Err(SgError::MapSolveFailed {
                    point: [i, 0],
                    iterations,
                    residual,
                })
            }
            Err(PointFailure::Certificate { eig }) => {
                return Err(SgError::ContractionLost {
                    point: [i, 0],
                    eig,
                    guard: params.guard_c0,
                })
            }
        }
    }
    Ok(out)
}

/// `sup_x |F(z(x)) − x|` with `F` solved pointwise at the images of `z`.
pub fn round_trip_error(ctx: &StepContext, params: &MapSolveParams, z: &PeriodicMap) -> Result<f64> {
    let grid = ctx.grid();
    let back = solve_forward_at(ctx, params, &z.node_images())?;
    Ok(back
        .iter()
        .enumerate()
        .map(|(idx, x)| {
            let d = vsub(*x, grid.point(idx));
            d[0].abs().max(d[1].abs())
        })
        .fold(0.0, f64::max))
}

/// `sup_x |Q̂(x, z(x))|` over the grid nodes.
pub fn backward_residual(ctx: &StepContext, z: &PeriodicMap) -> f64 {
    let grid = ctx.grid();
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let x = grid.point(idx);
            let zi = z.node_image(idx);
            let r = qhat_parts(x, zi, &ctx.x_node(idx), &ctx.z_data(zi), ctx.dt);
            r[0].abs().max(r[1].abs())
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coriolis::TrigPoly;
    use crate::map::compose;
    use std::f64::consts::PI;

    fn ctx_for(n: usize, f: &TrigPoly, p: impl Fn(Vec2) -> f64, q: impl Fn(Vec2) -> f64, dt: f64) -> StepContext {
        let g = GridSpec::new(n).unwrap();
        let cor = Arc::new(CoriolisContext::from_poly(g, f).unwrap());
        StepContext::new(cor, PeriodicField::from_fn(g, p), PeriodicField::from_fn(g, q), dt).unwrap()
    }

    fn scenario(dt: f64) -> StepContext {
        let f = TrigPoly::constant(1.0).with_mode(0, 1, 0.0, 0.1);
        let p = |x: Vec2| 0.01 * (2.0 * PI * x[0]).cos();
        ctx_for(8, &f, p, p, dt)
    }

    fn zero_ctx(dt: f64) -> StepContext {
        let f = TrigPoly::constant(1.3).with_mode(1, 1, 0.2, 0.0);
        ctx_for(8, &f, |_| 0.0, |_| 0.0, dt)
    }

    #[test]
    fn zero_fields_reduce_to_difference() {
        let ctx = zero_ctx(0.05);
        let pts = [[0.1, 0.7], [0.33, 0.21], [0.9, 0.05]];
        for x in pts {
            assert_eq!(qhat(x, x, &ctx), [0.0, 0.0]);
            for z in pts {
                let r = qhat(x, z, &ctx);
                assert!((r[0] - (x[0] - z[0])).abs() < 1e-15);
                assert!((r[1] - (x[1] - z[1])).abs() < 1e-15);
            }
            assert_eq!(qhat_dz(x, [0.4, 0.4], &ctx), -IDENTITY);
        }
    }

    #[test]
    fn equal_fields_at_zero_dt_vanish_on_diagonal() {
        let ctx = scenario(0.0);
        for x in [[0.1, 0.7], [0.33, 0.21]] {
            let r = qhat(x, x, &ctx);
            assert!(r[0].abs() < 1e-15 && r[1].abs() < 1e-15, "{r:?}");
        }
    }

    #[test]
    fn base_point_jacobian_is_minus_stability_matrix() {
        let g = GridSpec::new(32).unwrap();
        let f = TrigPoly::constant(1.0).with_mode(1, 0, 0.0, 0.2);
        let p0 = |x: Vec2| 0.02 * (2.0 * PI * (x[0] + x[1])).sin() + 0.01 * (2.0 * PI * x[1]).cos();
        let ctx = ctx_for(32, &f, p0, p0, 0.0);
        let tp = 2.0 * PI;
        for idx in [0, 37, 101, 200, 999] {
            let x = g.point(idx);
            // closed forms for f = 1 + 0.2 sin(2πx₁) and p₀
            let fv = 1.0 + 0.2 * (tp * x[0]).sin();
            let fi = 1.0 / fv;
            let gfi = [-0.2 * tp * (tp * x[0]).cos() / (fv * fv), 0.0];
            let s = tp * (x[0] + x[1]);
            let c = 0.02 * tp * s.cos();
            let gp = [c, c - 0.01 * tp * (tp * x[1]).sin()];
            let h = -0.02 * tp * tp * s.sin();
            let hp = Mat2::new(h, h, h, h - 0.01 * tp * tp * (tp * x[1]).cos());
            let want = -(IDENTITY + (Mat2::outer(gp, gfi) + hp.scale(fi)).scale(fi));
            let got = qhat_dz(x, x, &ctx);
            assert!((got - want).max_abs() < 1e-10, "{got:?} vs {want:?}");
        }
    }

    fn random_ctx() -> StepContext {
        let f = TrigPoly::constant(1.0).with_mode(1, 0, 0.15, 0.0).with_mode(1, -1, 0.0, 0.05);
        let p = |x: Vec2| 0.01 * (2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).sin() + 0.002 * (4.0 * PI * x[1]).cos();
        let q = |x: Vec2| 0.005 * (2.0 * PI * (x[0] - x[1])).sin() + 0.006 * (2.0 * PI * x[0]).cos();
        ctx_for(16, &f, p, q, 0.01)
    }

    #[test]
    fn jacobians_match_central_differences() {
        let ctx = random_ctx();
        let h = 1e-6;
        let pts = [([0.13, 0.71], [0.17, 0.69]), ([0.52, 0.05], [0.5, 0.08]), ([0.9, 0.4], [0.91, 0.38])];
        for (x, z) in pts {
            let jz = qhat_dz(x, z, &ctx);
            let jx = qhat_dx(x, z, &ctx);
            for k in 0..2 {
                let mut zp = z;
                let mut zm = z;
                zp[k] += h;
                zm[k] -= h;
                let mut xp = x;
                let mut xm = x;
                xp[k] += h;
                xm[k] -= h;
                let fz = vsub(qhat(x, zp, &ctx), qhat(x, zm, &ctx));
                let fx = vsub(qhat(xp, z, &ctx), qhat(xm, z, &ctx));
                for i in 0..2 {
                    let dz = fz[i] / (2.0 * h);
                    let dx = fx[i] / (2.0 * h);
                    let scale_z = jz.max_abs();
                    let scale_x = jx.max_abs();
                    assert!((dz - jz.0[i][k]).abs() <= 1e-6 * scale_z, "dz {i}{k}: {dz} vs {}", jz.0[i][k]);
                    assert!((dx - jx.0[i][k]).abs() <= 1e-6 * scale_x, "dx {i}{k}: {dx} vs {}", jx.0[i][k]);
                }
            }
        }
    }

    #[test]
    fn trivial_inputs_give_identity_maps() {
        let params = MapSolveParams::default();
        for ctx in [zero_ctx(0.05), scenario(0.0)] {
            let z = solve_backward(&ctx, &params).unwrap();
            assert!(z.displacement_sup() < 1e-14, "{}", z.displacement_sup());
            let f = solve_forward(&ctx, &params).unwrap();
            assert!(f.displacement_sup() < 1e-14, "{}", f.displacement_sup());
        }
    }

    /// Independent trigonometric interpolant via direct DFT sums.
    struct Naive {
        n: usize,
        coef: Vec<(i64, i64, f64, f64)>,
    }

    impl Naive {
        fn new(n: usize, samples: &[f64]) -> Self {
            let mut coef = Vec::new();
            let h = n as i64 / 2;
            for k1 in -h..h {
                for k2 in -h..h {
                    let (mut re, mut im) = (0.0, 0.0);
                    for i in 0..n {
                        for j in 0..n {
                            let ph = -2.0 * PI * (k1 * i as i64 + k2 * j as i64) as f64 / n as f64;
                            re += samples[i * n + j] * ph.cos();
                            im += samples[i * n + j] * ph.sin();
                        }
                    }
                    let nn = (n * n) as f64;
                    coef.push((k1, k2, re / nn, im / nn));
                }
            }
            Naive { n, coef }
        }

        fn eval(&self, x: Vec2) -> f64 {
            let h = self.n as i64 / 2;
            self.coef
                .iter()
                .map(|&(k1, k2, re, im)| {
                    // Nyquist modes contribute their cosine part only.
                    let c1 = k1 == -h;
                    let c2 = k2 == -h;
                    let a = |k: i64, c: bool, t: f64| {
                        let ph = 2.0 * PI * k as f64 * t;
                        if c { (ph.cos(), 0.0) } else { (ph.cos(), ph.sin()) }
                    };
                    let (a1, b1) = a(k1, c1, x[0]);
                    let (a2, b2) = a(k2, c2, x[1]);
                    let (er, ei) = (a1 * a2 - b1 * b2, a1 * b2 + b1 * a2);
                    re * er - im * ei
                })
                .sum()
        }
    }

    #[test]
    fn backward_matches_brute_force_fixed_point() {
        let ctx = scenario(0.01);
        let n = 8;
        let cor = &ctx.coriolis;
        let fi = Naive::new(n, cor.f_inv.samples());
        let gp = [Naive::new(n, ctx.grad_p[0].samples()), Naive::new(n, ctx.grad_p[1].samples())];
        let z = solve_backward(&ctx, &MapSolveParams::default()).unwrap();
        let grid = ctx.grid();
        let mut worst: f64 = 0.0;
        for idx in 0..grid.len() {
            let x = grid.point(idx);
            let fx = cor.f_inv.samples()[idx];
            let gq = [ctx.grad_q[0].samples()[idx], ctx.grad_q[1].samples()[idx]];
            let g = |z: Vec2| {
                let s = fi.eval(z);
                let r = rotation(ctx.dt / s);
                let v = r.mul_vec([gp[0].eval(z), gp[1].eval(z)]);
                let a = vadd(x, [fx * s * gq[0], fx * s * gq[1]]);
                vsub(vsub(a, z), [s * s * v[0], s * s * v[1]])
            };
            // damped fixed point z ← z + ω Q̂(x, z) inside a trust region around x,
            // with ω bisected whenever the residual fails to shrink
            let mut zk = x;
            let mut r = g(zk);
            for _ in 0..20000 {
                let res = r[0].abs().max(r[1].abs());
                if res < 1e-15 {
                    break;
                }
                let mut w = 1.0;
                loop {
                    let cand = [zk[0] + w * r[0], zk[1] + w * r[1]];
                    let within = (cand[0] - x[0]).abs() < 0.2 && (cand[1] - x[1]).abs() < 0.2;
                    let rc = g(cand);
                    if within && rc[0].abs().max(rc[1].abs()) < res {
                        zk = cand;
                        r = rc;
                        break;
                    }
                    w *= 0.5;
                    assert!(w > 1e-6, "oracle stalled");
                }
            }
            let zi = z.node_image(idx);
            worst = worst.max((zi[0] - zk[0]).abs()).max((zi[1] - zk[1]).abs());
        }
        assert!(worst <= 1e-9, "sup difference {worst:e}");
    }

    #[test]
    fn forward_inverts_backward() {
        let ctx = scenario(0.01);
        let params = MapSolveParams::default();
        let z = solve_backward(&ctx, &params).unwrap();
        let err = round_trip_error(&ctx, &params, &z).unwrap();
        assert!(err <= 1e-9, "{err:e}");
        assert!(err <= 10.0 * params.tol, "{err:e}");
        // the node-sampled forward map agrees with pointwise solves at the nodes
        let f = solve_forward(&ctx, &params).unwrap();
        let direct = solve_forward_at(&ctx, &params, &ctx.grid().points()).unwrap();
        for (idx, x) in direct.iter().enumerate() {
            let d = vsub(f.node_image(idx), *x);
            assert!(d[0].abs().max(d[1].abs()) < 1e-12);
        }
        // interpolated composition carries the aliasing of the n = 8 forward map
        let id = compose(&f, &z).unwrap();
        assert!(id.displacement_sup() <= 1e-8, "{:e}", id.displacement_sup());
    }

    #[test]
    fn residual_below_tolerance_and_periodic() {
        let ctx = random_ctx();
        let params = MapSolveParams::default();
        let z = solve_backward(&ctx, &params).unwrap();
        assert!(backward_residual(&ctx, &z) <= params.tol);
        let grid = ctx.grid();
        for idx in [0, 19, 140, 255] {
            let x = grid.point(idx);
            let zi = z.node_image(idx);
            let r0 = qhat(x, zi, &ctx);
            let r1 = qhat([x[0] + 1.0, x[1]], [zi[0] + 1.0, zi[1]], &ctx);
            assert!((r0[0] - r1[0]).abs() < 1e-12 && (r0[1] - r1[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn displacement_scales_with_dt() {
        let ratios: Vec<f64> = [1e-2, 5e-3, 2.5e-3]
            .iter()
            .map(|&dt| {
                let z = solve_backward(&random_ctx_dt(dt), &MapSolveParams::default()).unwrap();
                z.displacement_sup() / dt
            })
            .collect();
        for r in &ratios {
            assert!(r.is_finite() && *r > 0.0);
        }
        let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0_f64), |(l, h), &r| (l.min(r), h.max(r)));
        assert!(hi / lo < 1.2, "{ratios:?}");
    }

    fn random_ctx_dt(dt: f64) -> StepContext {
        let f = TrigPoly::constant(1.0).with_mode(1, 0, 0.15, 0.0);
        let p = |x: Vec2| 0.01 * (2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).sin();
        ctx_for(16, &f, p, p, dt)
    }

    #[test]
    fn lost_contraction_is_reported() {
        // strongly non-convex p makes −∂_zQ̂ indefinite at some nodes
        let f = TrigPoly::constant(1.0);
        let p = |x: Vec2| 0.1 * (2.0 * PI * x[0]).cos();
        let ctx = ctx_for(8, &f, p, p, 0.0);
        let err = solve_backward(&ctx, &MapSolveParams::default()).unwrap_err();
        assert!(matches!(err, SgError::ContractionLost { point: [0, 0], .. }), "{err}");
    }

    #[test]
    fn params_are_validated() {
        let p = MapSolveParams { tol: 0.0, max_iter: 0, guard_c0: -1.0 };
        match p.validate() {
            Err(SgError::ConfigInvalid(v)) => assert_eq!(v.len(), 3),
            other => panic!("{other:?}"),
        }
    }
}
