//! One implicit time step: find `q` with `P(q, p, dt) = 0`, where `P` is the
//! Monge–Ampère-type residual built from the backward map of `Q̂`.
//!
//! SG: `P = det(S_q + A) / det(S_p∘z + B) − 1`.
//! SGSW: `P = h∘z · det(S_q + A) / det(S_h∘z + B) − q`.

use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::Mat;
use rayon::prelude::*;

use crate::coriolis::CoriolisContext;
use crate::elliptic::{EllipticOperator, Gauge};
use crate::error::{Result, SgError};
use crate::field::{GridSpec, MatrixField, PeriodicField};
use crate::implicit_map::{rotated_jacobian, solve_backward_from, MapSolveParams, StepContext};
use crate::linalg::{Mat2, IDENTITY};
use crate::map::PeriodicMap;

/// `S = I + f⁻¹∇p⊗∇f⁻¹ + f⁻²D²p` at every node.
pub type StabilityMatrix = MatrixField;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    /// Semi-geostrophic, unknown is the geopotential `p`.
    Sg,
    /// Semi-geostrophic shallow water, unknown is the height `h > 0`.
    Sgsw,
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::Sg => "sg",
            Model::Sgsw => "sgsw",
        }
    }
}

/// How the Newton correction is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum JacobianMode {
    /// Elliptic linearization reassembled at every iterate.
    #[default]
    PerIterate,
    /// Elliptic linearization assembled once at `q = p` and reused.
    Chord,
    /// Dense central-difference Jacobian of the discrete residual.
    FiniteDifference,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MAStepParams {
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Maximum step halvings per Newton iterate.
    pub damping: usize,
    pub convexity_floor: f64,
    pub ab_bound: f64,
    /// SGSW only: smallest admissible height.
    pub positivity_floor: f64,
    pub elliptic_tol: f64,
    pub dt_max: f64,
    pub map: MapSolveParams,
    pub jacobian: JacobianMode,
}

impl MAStepParams {
    /// Defaults scaled by the convexity constant `c₀` of the initial data:
    /// floor `c₀/2`, `A`/`B` bound `c₀/8`, map certificate `c₀/4`.
    pub fn from_c0(c0: f64) -> Self {
        MAStepParams {
            newton_tol: 1e-11,
            max_newton: 30,
            damping: 8,
            convexity_floor: c0 / 2.0,
            ab_bound: c0 / 8.0,
            positivity_floor: 1e-3,
            elliptic_tol: 1e-10,
            dt_max: f64::INFINITY,
            map: MapSolveParams {
                guard_c0: c0 / 4.0,
                ..MapSolveParams::default()
            },
            jacobian: JacobianMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("newton_tol", self.newton_tol),
            ("convexity_floor", self.convexity_floor),
            ("ab_bound", self.ab_bound),
            ("positivity_floor", self.positivity_floor),
            ("elliptic_tol", self.elliptic_tol),
            ("dt_max", self.dt_max),
        ] {
            if !(v > 0.0) {
                errs.push(format!("{name} must be > 0, got {v}"));
            }
        }
        if self.max_newton == 0 {
            errs.push("max_newton must be >= 1".to_string());
        }
        if let Err(SgError::ConfigInvalid(more)) = self.map.validate() {
            errs.extend(more);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SgError::ConfigInvalid(errs))
        }
    }
}

impl Default for MAStepParams {
    fn default() -> Self {
        Self::from_c0(1.0)
    }
}

/// `S(p)` from the node values of `∇p`, `D²p`, `f⁻¹`, `∇f⁻¹`.
pub fn stability_matrix(p: &PeriodicField, cor: &CoriolisContext) -> Result<StabilityMatrix> {
    cor.grid().check_same(&p.grid())?;
    let [p1, p2] = p.gradient()?;
    let [h11, h12, h22] = p.hessian()?;
    let fi = cor.f_inv.samples();
    let [g1, g2] = &cor.grad_f_inv;
    Ok(MatrixField::from_fn(p.grid(), |i| {
        let g = [p1.samples()[i], p2.samples()[i]];
        let h = Mat2::new(h11.samples()[i], h12.samples()[i], h12.samples()[i], h22.samples()[i]);
        IDENTITY + (Mat2::outer(g, [g1.samples()[i], g2.samples()[i]]) + h.scale(fi[i])).scale(fi[i])
    }))
}

/// `I + f⁻¹D(f⁻¹Dp)` with the outer derivative taken spectrally.
pub fn stability_matrix_nested(p: &PeriodicField, cor: &CoriolisContext) -> Result<StabilityMatrix> {
    let fi = &cor.f_inv;
    let [p1, p2] = p.gradient()?;
    let [a11, a12] = fi.mul(&p1).gradient()?;
    let [a21, a22] = fi.mul(&p2).gradient()?;
    Ok(MatrixField::from_fn(p.grid(), |i| {
        let d = Mat2::new(a11.samples()[i], a12.samples()[i], a21.samples()[i], a22.samples()[i]);
        IDENTITY + d.scale(fi.samples()[i])
    }))
}

/// `(min λ_min(sym S), location)`.
pub fn convexity(s: &StabilityMatrix) -> (f64, [usize; 2]) {
    s.sym_min_eig().min_with_location()
}

fn check_convexity(s: &StabilityMatrix, floor: f64) -> Result<f64> {
    let (min_eig, point) = convexity(s);
    if min_eig < floor {
        return Err(SgError::ConvexityLost {
            min_eig,
            floor,
            point,
        });
    }
    Ok(min_eig)
}

fn check_positivity(h: &PeriodicField, floor: f64) -> Result<()> {
    let (min, point) = h.min_with_location();
    if min < floor {
        return Err(SgError::PositivityLost { min, floor, point });
    }
    Ok(())
}

/// The perturbation matrices `A`, `B` of one step, with the matrices they
/// perturb: `∂_xQ̂ = S_q + A` and `−∂_zQ̂ = S_p∘z + B`.
#[derive(Clone, Debug)]
pub struct StepMatrices {
    pub a: MatrixField,
    pub b: MatrixField,
    pub s_q: MatrixField,
    pub s_p_z: MatrixField,
    /// `p∘z` (the height at the departure point for SGSW).
    pub p_z: PeriodicField,
    pub sup_a: f64,
    pub sup_b: f64,
}

/// Assembles `A` and `B` at every node for the backward map `z`.
pub fn matrices_ab(ctx: &StepContext, z: &PeriodicMap) -> Result<StepMatrices> {
    let grid = ctx.grid();
    grid.check_same(&z.grid())?;
    let dt = ctx.dt;
    let per_node: Vec<([Mat2; 4], f64)> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let xd = ctx.x_node(idx);
            let zd = ctx.z_data(z.node_image(idx));
            let dfi = zd.fi - xd.fi;
            let a = Mat2::outer(xd.g, xd.gfi).scale(dfi) + xd.h.scale(xd.fi * dfi);
            let carried = [zd.fi * zd.g[0] - xd.fi * xd.g[0], zd.fi * zd.g[1] - xd.fi * xd.g[1]];
            let unrotated = Mat2::outer(zd.g, zd.gfi).scale(2.0 * zd.fi) + zd.h.scale(zd.fi * zd.fi);
            let b = Mat2::outer(carried, zd.gfi) + rotated_jacobian(&zd, dt) - unrotated;
            ([a, b, xd.stability(), zd.stability()], zd.v)
        })
        .collect();
    let pick = |k: usize| MatrixField::from_mats(grid, &per_node.iter().map(|m| m.0[k]).collect::<Vec<_>>());
    let p_z: Vec<f64> = per_node.iter().map(|m| m.1).collect();
    let a = pick(0);
    let b = pick(1);
    Ok(StepMatrices {
        sup_a: a.sup_norm(),
        sup_b: b.sup_norm(),
        a,
        b,
        s_q: pick(2),
        s_p_z: pick(3),
        p_z: PeriodicField::new(grid, p_z)?,
    })
}

/// Residual field from assembled step matrices.
pub fn residual_from(mats: &StepMatrices, q: &PeriodicField, model: Model) -> Result<PeriodicField> {
    let grid = q.grid();
    let mut out = Vec::with_capacity(grid.len());
    for idx in 0..grid.len() {
        let num = (mats.s_q.at(idx) + mats.a.at(idx)).det();
        let den = (mats.s_p_z.at(idx) + mats.b.at(idx)).det();
        if !(den > 0.0) {
            return Err(SgError::DegenerateDeterminant {
                point: grid.coords(idx),
                value: den,
            });
        }
        out.push(match model {
            Model::Sg => num / den - 1.0,
            Model::Sgsw => mats.p_z.samples()[idx] * num / den - q.samples()[idx],
        });
    }
    PeriodicField::new(grid, out)
}

/// One evaluation of the step residual at a candidate `q`.
#[derive(Clone, Debug)]
pub struct ResidualEval {
    pub ctx: StepContext,
    pub zmap: PeriodicMap,
    pub mats: StepMatrices,
    pub residual: PeriodicField,
    pub sup: f64,
}

impl ResidualEval {
    /// SG: `|mean P|`. SGSW: `|mean(P + q) − mean(h)|`.
    pub fn mean_defect(&self, model: Model) -> f64 {
        match model {
            Model::Sg => self.residual.mean().abs(),
            Model::Sgsw => (self.residual.mean() + self.ctx.q.mean() - self.ctx.p.mean()).abs(),
        }
    }
}

/// Solves the backward map for `ctx` and evaluates the residual there.
pub fn evaluate(
    ctx: StepContext,
    model: Model,
    map: &MapSolveParams,
    warm: Option<&PeriodicMap>,
) -> Result<ResidualEval> {
    let zmap = solve_backward_from(&ctx, map, warm)?;
    let mats = matrices_ab(&ctx, &zmap)?;
    let residual = residual_from(&mats, &ctx.q, model)?;
    let sup = residual.sup_norm();
    Ok(ResidualEval {
        ctx,
        zmap,
        mats,
        residual,
        sup,
    })
}

/// `P(q, p, dt)` for the given model.
pub fn residual(
    q: &PeriodicField,
    p: &PeriodicField,
    dt: f64,
    model: Model,
    cor: &Arc<CoriolisContext>,
    map: &MapSolveParams,
) -> Result<PeriodicField> {
    if model == Model::Sgsw {
        check_positivity(p, f64::MIN_POSITIVE)?;
    }
    let ctx = StepContext::new(cor.clone(), p.clone(), q.clone(), dt)?;
    Ok(evaluate(ctx, model, map, None)?.residual)
}

fn linear_operator(field: &PeriodicField, model: Model, cor: &CoriolisContext) -> Result<EllipticOperator> {
    let s = stability_matrix(field, cor)?;
    let grid = field.grid();
    let fi2 = cor.f_inv_sq.samples();
    let mut mats = Vec::with_capacity(grid.len());
    for idx in 0..grid.len() {
        let inv = s.at(idx).inverse().ok_or_else(|| SgError::DegenerateDeterminant {
            point: grid.coords(idx),
            value: s.at(idx).det(),
        })?;
        let w = match model {
            Model::Sg => fi2[idx],
            Model::Sgsw => fi2[idx] * field.samples()[idx],
        };
        mats.push(inv.scale(w));
    }
    let k = MatrixField::from_mats(grid, &mats);
    let (c, gauge) = match model {
        Model::Sg => (PeriodicField::zeros(grid), Gauge::MeanZero),
        Model::Sgsw => (PeriodicField::constant(grid, -1.0), Gauge::None),
    };
    EllipticOperator::from_divergence(&k, c, gauge)
}

/// Linearization of `P` in `q` at `(p, p, 0)`:
/// SG `h ↦ ∇·(S⁻¹f⁻²∇h)`, SGSW `h₁ ↦ ∇·(h S⁻¹f⁻²∇h₁) − h₁`, held in
/// non-divergence form. `a = sym(S⁻¹f⁻²)` equals `M f⁻²/det S` up to the
/// transpose, which the symmetrization removes.
pub fn linearized_coefficients(
    p: &PeriodicField,
    model: Model,
    cor: &CoriolisContext,
    convexity_floor: f64,
) -> Result<EllipticOperator> {
    check_convexity(&stability_matrix(p, cor)?, convexity_floor)?;
    if model == Model::Sgsw {
        check_positivity(p, f64::MIN_POSITIVE)?;
    }
    linear_operator(p, model, cor)
}

fn apply_gauge(q: PeriodicField, model: Model, mass: f64) -> PeriodicField {
    match model {
        Model::Sg => q.mean_project(),
        Model::Sgsw => {
            let shift = mass - q.mean();
            q.map(|v| v + shift)
        }
    }
}

/// Result of one accepted time step.
#[derive(Clone, Debug)]
pub struct MaStep {
    pub q: PeriodicField,
    pub zmap: PeriodicMap,
    pub matrices: StepMatrices,
    pub newton_iterations: usize,
    /// `sup|P|` at every accepted iterate, starting at `q = p`.
    pub residual_history: Vec<f64>,
    /// Largest mean-identity defect over all evaluated iterates.
    pub max_mean_defect: f64,
    /// Largest bordering multiplier seen in the linear solves.
    pub max_multiplier: f64,
    /// `min λ_min(S(q))`.
    pub convexity_min: f64,
    /// `min λ_min(sym C(x))`.
    pub certificate_min: f64,
}

const GAUSS5: [(f64, f64); 5] = [
    (0.046_910_077_030_668_0, 0.118_463_442_528_094_5),
    (0.230_765_344_947_158_5, 0.239_314_335_249_683_2),
    (0.5, 0.284_444_444_444_444_4),
    (0.769_234_655_052_841_5, 0.239_314_335_249_683_2),
    (0.953_089_922_969_332_0, 0.118_463_442_528_094_5),
];

/// Segment-averaged stability matrix between `z(x)` and `x`:
/// `C = I + ∫D(f⁻²∇p)(γ) − f⁻¹(x)∇p(x)⊗∫∇f⁻¹(γ)`, `γ = (1−θ)z + θx`.
pub fn certificate_matrix(ctx: &StepContext, z: &PeriodicMap) -> MatrixField {
    let grid = ctx.grid();
    let mats: Vec<Mat2> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let x = grid.point(idx);
            let zi = z.node_image(idx);
            let xd = ctx.z_node(idx);
            let mut dg = Mat2::zero();
            let mut gfi = [0.0; 2];
            for (t, w) in GAUSS5 {
                let y = [(1.0 - t) * zi[0] + t * x[0], (1.0 - t) * zi[1] + t * x[1]];
                let d = ctx.z_data(y);
                dg = dg + (Mat2::outer(d.g, d.gfi).scale(2.0 * d.fi) + d.h.scale(d.fi * d.fi)).scale(w);
                gfi = [gfi[0] + w * d.gfi[0], gfi[1] + w * d.gfi[1]];
            }
            IDENTITY + dg - Mat2::outer(xd.g, gfi).scale(xd.fi)
        })
        .collect();
    MatrixField::from_mats(grid, &mats)
}

/// Dense central-difference Jacobian of the residual in the node values of `q`.
fn fd_correction(cur: &ResidualEval, model: Model, params: &MAStepParams) -> Result<PeriodicField> {
    let grid = cur.ctx.grid();
    let len = grid.len();
    let bordered = model == Model::Sg;
    let size = len + usize::from(bordered);
    let h = 1e-6 * (1.0 + cur.ctx.q.sup_norm());
    let mut jac = Mat::<f64>::zeros(size, size);
    for k in 0..len {
        let column = |sign: f64| -> Result<Vec<f64>> {
            let mut s = cur.ctx.q.samples().to_vec();
            s[k] += sign * h;
            let ctx = cur.ctx.with_q(PeriodicField::new(grid, s)?)?;
            Ok(evaluate(ctx, model, &params.map, Some(&cur.zmap))?.residual.into_samples())
        };
        let plus = column(1.0)?;
        let minus = column(-1.0)?;
        for r in 0..len {
            jac[(r, k)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
    if bordered {
        for r in 0..len {
            jac[(r, len)] = 1.0;
            jac[(len, r)] = 1.0;
        }
    }
    let lu = jac.partial_piv_lu();
    let mut rhs = Mat::<f64>::from_fn(size, 1, |i, _| if i < len { -cur.residual.samples()[i] } else { 0.0 });
    lu.solve_in_place(rhs.as_mut());
    let delta: Vec<f64> = (0..len).map(|i| rhs[(i, 0)]).collect();
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(SgError::NewtonDiverged {
            iterations: 0,
            residual: cur.sup,
        });
    }
    PeriodicField::new(grid, delta)
}

/// Advances `p` by one step of size `dt`.
pub fn ma_solve(
    p: &PeriodicField,
    dt: f64,
    model: Model,
    cor: &Arc<CoriolisContext>,
    params: &MAStepParams,
) -> Result<MaStep> {
    params.validate()?;
    if !(dt.abs() <= params.dt_max) {
        return Err(SgError::ConfigInvalid(vec![format!(
            "dt = {dt} exceeds the cap {}",
            params.dt_max
        )]));
    }
    check_convexity(&stability_matrix(p, cor)?, params.convexity_floor)?;
    if model == Model::Sgsw {
        check_positivity(p, params.positivity_floor)?;
    }
    let mass = p.mean();
    let q0 = apply_gauge(p.clone(), model, mass);
    let base = StepContext::new(cor.clone(), p.clone(), q0, dt)?;

    let check_ab = |e: &ResidualEval| -> Result<()> {
        let (a, b) = (e.mats.sup_a, e.mats.sup_b);
        if a > params.ab_bound || b > params.ab_bound {
            return Err(SgError::AbTooLarge {
                a,
                b,
                bound: params.ab_bound,
            });
        }
        Ok(())
    };

    let mut cur = evaluate(base, model, &params.map, None)?;
    check_ab(&cur)?;
    let mut history = vec![cur.sup];
    let mut max_mean_defect = cur.mean_defect(model);
    let mut max_multiplier: f64 = 0.0;
    let chord = match params.jacobian {
        JacobianMode::Chord => Some(linear_operator(p, model, cor)?.factor()?),
        _ => None,
    };
    let mut iterations = 0;
    while cur.sup > params.newton_tol {
        if iterations == params.max_newton {
            return Err(SgError::NewtonDiverged {
                iterations,
                residual: cur.sup,
            });
        }
        let rhs = cur.residual.scale(-1.0);
        let delta = match params.jacobian {
            JacobianMode::FiniteDifference => fd_correction(&cur, model, params)?,
            JacobianMode::Chord => {
                let sol = chord.as_ref().expect("chord factor").solve(&rhs, params.elliptic_tol)?;
                max_multiplier = max_multiplier.max(sol.multiplier.abs());
                sol.u
            }
            JacobianMode::PerIterate => {
                let sol = linear_operator(&cur.ctx.q, model, cor)?
                    .factor()?
                    .solve(&rhs, params.elliptic_tol)?;
                max_multiplier = max_multiplier.max(sol.multiplier.abs());
                sol.u
            }
        };
        let mut lambda = 1.0;
        let mut accepted = None;
        let mut last_err = None;
        for _ in 0..=params.damping {
            let trial_q = apply_gauge(cur.ctx.q.add(&delta.scale(lambda)), model, mass);
            let trial = cur
                .ctx
                .with_q(trial_q)
                .and_then(|ctx| evaluate(ctx, model, &params.map, Some(&cur.zmap)))
                .and_then(|e| check_ab(&e).map(|_| e));
            match trial {
                Ok(e) => {
                    max_mean_defect = max_mean_defect.max(e.mean_defect(model));
                    if e.sup < cur.sup {
                        accepted = Some(e);
                        break;
                    }
                }
                Err(err) => last_err = Some(err),
            }
            lambda *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some(e) => {
                cur = e;
                history.push(cur.sup);
            }
            None => {
                return Err(last_err.unwrap_or(SgError::NewtonDiverged {
                    iterations,
                    residual: cur.sup,
                }))
            }
        }
    }

    let q = cur.ctx.q.clone();
    if model == Model::Sgsw {
        check_positivity(&q, params.positivity_floor)?;
    }
    let (convexity_min, _) = convexity(&stability_matrix(&q, cor)?);
    let cert = certificate_matrix(&cur.ctx, &cur.zmap);
    let (certificate_min, point) = cert.sym_min_eig().min_with_location();
    if certificate_min < params.map.guard_c0 {
        return Err(SgError::ContractionLost {
            point,
            eig: certificate_min,
            guard: params.map.guard_c0,
        });
    }
    Ok(MaStep {
        q,
        zmap: cur.zmap,
        matrices: cur.mats,
        newton_iterations: iterations,
        residual_history: history,
        max_mean_defect,
        max_multiplier,
        convexity_min,
        certificate_min,
    })
}

/// `ν(p) = det S(p)` (SG) or `det S(h)/h` (SGSW).
pub fn nu_field(p: &PeriodicField, model: Model, cor: &CoriolisContext) -> Result<PeriodicField> {
    let det = stability_matrix(p, cor)?.det();
    Ok(match model {
        Model::Sg => det,
        Model::Sgsw => det.zip_map(p, |d, h| d / h),
    })
}

/// Expected value of `det Dz` for the solved step: `1` (SG) or `q/(h∘z)` (SGSW).
pub fn det_target(step: &MaStep, model: Model) -> PeriodicField {
    let grid: GridSpec = step.q.grid();
    match model {
        Model::Sg => PeriodicField::constant(grid, 1.0),
        Model::Sgsw => step.q.zip_map(&step.matrices.p_z, |q, h| q / h),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coriolis::TrigPoly;
    use crate::implicit_map::{qhat_dx, qhat_dz};
    use crate::testutil::{random_trig, Rng};
    use std::f64::consts::PI;

    fn cor(n: usize, f: &TrigPoly) -> Arc<CoriolisContext> {
        Arc::new(CoriolisContext::from_poly(GridSpec::new(n).unwrap(), f).unwrap())
    }

    fn f_var() -> TrigPoly {
        TrigPoly::constant(1.0).with_mode(0, 1, 0.0, 0.1)
    }

    #[test]
    fn stability_of_zero_is_identity() {
        let c = cor(8, &f_var());
        let s = stability_matrix(&PeriodicField::zeros(c.grid()), &c).unwrap();
        assert!(s.mats().iter().all(|m| *m == IDENTITY));
        assert_eq!(convexity(&s).0, 1.0);
    }

    #[test]
    fn stability_of_sine_with_constant_f() {
        let c = cor(16, &TrigPoly::constant(1.0));
        let eps = 0.01;
        let p = PeriodicField::from_fn(c.grid(), |x| eps * (2.0 * PI * x[0]).sin());
        let s = stability_matrix(&p, &c).unwrap();
        for idx in 0..c.grid().len() {
            let x = c.grid().point(idx);
            let want = Mat2::diag(1.0 - 4.0 * PI * PI * eps * (2.0 * PI * x[0]).sin(), 1.0);
            assert!((s.at(idx) - want).max_abs() < 1e-13);
        }
        assert!((s.at(0) - IDENTITY).max_abs() < 1e-14);
    }

    #[test]
    fn stability_forms_agree() {
        let c = cor(32, &f_var());
        let mut rng = Rng::new(7);
        let p = random_trig(&mut rng, 3, 0.005).sample(c.grid());
        let a = stability_matrix(&p, &c).unwrap();
        let b = stability_matrix_nested(&p, &c).unwrap();
        let worst = (0..c.grid().len()).map(|i| (a.at(i) - b.at(i)).max_abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12, "{worst:e}");
    }

    fn params_for(p: &PeriodicField, c: &CoriolisContext) -> MAStepParams {
        MAStepParams::from_c0(convexity(&stability_matrix(p, c).unwrap()).0)
    }

    fn small_state(g: GridSpec) -> PeriodicField {
        PeriodicField::from_fn(g, |x| 0.01 * (2.0 * PI * x[0]).cos() + 0.004 * (2.0 * PI * (x[0] + x[1])).sin())
    }

    #[test]
    fn trivial_data_give_zero_ab_and_residual() {
        let c = cor(8, &f_var());
        let g = c.grid();
        let mp = MapSolveParams::default();
        let zero = PeriodicField::zeros(g);
        let r = residual(&zero, &zero, 0.02, Model::Sg, &c, &mp).unwrap();
        assert_eq!(r.sup_norm(), 0.0);
        let p = small_state(g);
        let ctx = StepContext::new(c.clone(), p.clone(), p.clone(), 0.0).unwrap();
        let e = evaluate(ctx, Model::Sg, &mp, None).unwrap();
        assert!(e.mats.sup_a < 1e-15 && e.mats.sup_b < 1e-15, "{} {}", e.mats.sup_a, e.mats.sup_b);
        assert!(e.sup < 1e-14);
        let ctx = StepContext::new(c.clone(), zero.clone(), zero.clone(), 0.05).unwrap();
        let e = evaluate(ctx, Model::Sg, &mp, None).unwrap();
        assert_eq!(e.mats.sup_a, 0.0);
        assert_eq!(e.mats.sup_b, 0.0);
        let one = PeriodicField::constant(g, 1.0);
        let r = residual(&one, &one, 0.0, Model::Sgsw, &c, &mp).unwrap();
        assert!(r.sup_norm() < 1e-15);
    }

    #[test]
    fn perturbed_matrices_match_map_jacobians() {
        let c = cor(16, &f_var());
        let g = c.grid();
        let p = small_state(g);
        let q = p.add(&PeriodicField::from_fn(g, |x| 0.002 * (2.0 * PI * x[1]).cos()));
        let ctx = StepContext::new(c.clone(), p, q, 0.02).unwrap();
        let e = evaluate(ctx.clone(), Model::Sg, &MapSolveParams::default(), None).unwrap();
        for idx in [0, 17, 100, 255] {
            let x = g.point(idx);
            let z = e.zmap.node_image(idx);
            let dx = qhat_dx(x, z, &ctx);
            let dz = qhat_dz(x, z, &ctx);
            assert!((e.mats.s_q.at(idx) + e.mats.a.at(idx) - dx).max_abs() < 1e-13);
            assert!((e.mats.s_p_z.at(idx) + e.mats.b.at(idx) + dz).max_abs() < 1e-13);
        }
    }

    #[test]
    fn ab_scale_with_dt() {
        let c = cor(16, &f_var());
        let p = small_state(c.grid());
        let params = params_for(&p, &c);
        let ratios: Vec<(f64, f64)> = [1e-2, 5e-3, 2.5e-3]
            .iter()
            .map(|&dt| {
                let step = ma_solve(&p, dt, Model::Sg, &c, &params).unwrap();
                (step.matrices.sup_a / dt, step.matrices.sup_b / dt)
            })
            .collect();
        for w in ratios.windows(2) {
            assert!(w[1].0 <= 1.1 * w[0].0 && w[1].1 <= 1.1 * w[0].1, "{ratios:?}");
        }
        assert!(ratios.iter().all(|r| r.0.is_finite() && r.1 > 0.0));
    }

    #[test]
    fn linearized_coefficients_trivial_cases() {
        let c1 = cor(8, &TrigPoly::constant(1.0));
        let g = c1.grid();
        let zero = PeriodicField::zeros(g);
        let op = linearized_coefficients(&zero, Model::Sg, &c1, 0.5).unwrap();
        let [a11, a12, a22] = op.principal();
        assert!(a11.samples().iter().all(|&v| v == 1.0) && a22.samples().iter().all(|&v| v == 1.0));
        assert_eq!(a12.sup_norm(), 0.0);
        assert_eq!(op.drift()[0].sup_norm() + op.drift()[1].sup_norm(), 0.0);
        assert_eq!(op.zero_order().sup_norm(), 0.0);
        let one = PeriodicField::constant(g, 1.0);
        let op = linearized_coefficients(&one, Model::Sgsw, &c1, 0.5).unwrap();
        assert!(op.principal()[0].samples().iter().all(|&v| v == 1.0));
        assert!(op.zero_order().samples().iter().all(|&v| v == -1.0));

        let cv = cor(8, &f_var());
        let op = linearized_coefficients(&zero, Model::Sg, &cv, 0.5).unwrap();
        let want = &cv.f_inv_sq;
        assert!(op.principal()[0].sub(want).sup_norm() < 1e-15);
        assert!(op.principal()[2].sub(want).sup_norm() < 1e-15);
        assert_eq!(op.principal()[1].sup_norm(), 0.0);
    }

    #[test]
    fn convexity_floor_enforced() {
        let c = cor(8, &TrigPoly::constant(1.0));
        let p = PeriodicField::from_fn(c.grid(), |x| 0.05 * (2.0 * PI * x[0]).cos());
        let err = linearized_coefficients(&p, Model::Sg, &c, 0.5).unwrap_err();
        assert!(matches!(err, SgError::ConvexityLost { .. }), "{err}");
    }

    fn directional_check(model: Model, p0: PeriodicField, c: &Arc<CoriolisContext>) {
        let g = p0.grid();
        let mut rng = Rng::new(99);
        let h = random_trig(&mut rng, 2, 0.3).sample(g);
        let mp = MapSolveParams::default();
        let eps = 1e-6;
        let rm = residual(&p0.sub(&h.scale(eps)), &p0, 0.0, model, c, &mp).unwrap();
        let rp = residual(&p0.add(&h.scale(eps)), &p0, 0.0, model, c, &mp).unwrap();
        let fd = rp.sub(&rm).scale(0.5 / eps);
        let lh = linearized_coefficients(&p0, model, c, 0.1).unwrap().apply(&h).unwrap();
        let rel = lh.sub(&fd).sup_norm() / lh.sup_norm();
        assert!(rel <= 1e-4, "{model:?}: relative error {rel:e}");
    }

    #[test]
    fn linearization_is_frechet_derivative_sg() {
        let c = cor(32, &f_var());
        directional_check(Model::Sg, small_state(c.grid()), &c);
    }

    #[test]
    fn linearization_is_frechet_derivative_sgsw() {
        let c = cor(32, &f_var());
        let h0 = small_state(c.grid()).map(|v| 1.0 + v);
        directional_check(Model::Sgsw, h0, &c);
    }

    #[test]
    fn zero_state_is_stationary() {
        let c = cor(8, &f_var());
        let zero = PeriodicField::zeros(c.grid());
        for dt in [0.0, 0.01, 0.05] {
            let step = ma_solve(&zero, dt, Model::Sg, &c, &MAStepParams::default()).unwrap();
            assert_eq!(step.q.sup_norm(), 0.0);
            assert_eq!(step.zmap.displacement_sup(), 0.0);
            assert_eq!(step.newton_iterations, 0);
        }
    }

    #[test]
    fn zero_dt_returns_input() {
        let c = cor(8, &f_var());
        let p = small_state(c.grid());
        let step = ma_solve(&p, 0.0, Model::Sg, &c, &params_for(&p, &c)).unwrap();
        assert_eq!(step.newton_iterations, 0);
        assert!(step.q.sub(&p.mean_project()).sup_norm() == 0.0);
    }

    #[test]
    fn sg_step_post_conditions() {
        let c = cor(16, &f_var());
        let p = small_state(c.grid());
        let params = params_for(&p, &c);
        let step = ma_solve(&p, 0.01, Model::Sg, &c, &params).unwrap();
        assert!(*step.residual_history.last().unwrap() <= params.newton_tol);
        assert!(step.q.mean().abs() < 1e-12);
        assert!(step.max_mean_defect <= 1e-8, "{:e}", step.max_mean_defect);
        assert!(step.certificate_min >= params.map.guard_c0);
        assert!(step.convexity_min >= params.convexity_floor);
        let det = step.zmap.det_jacobian().unwrap();
        let err = det.sub(&det_target(&step, Model::Sg)).sup_norm();
        assert!(err <= 100.0 * params.newton_tol, "{err:e}");
    }

    #[test]
    fn sgsw_step_post_conditions() {
        let c = cor(16, &f_var());
        let h = small_state(c.grid()).map(|v| 1.0 + v);
        let params = params_for(&h, &c);
        let step = ma_solve(&h, 0.01, Model::Sgsw, &c, &params).unwrap();
        assert!(*step.residual_history.last().unwrap() <= params.newton_tol);
        assert!((step.q.mean() - 1.0).abs() < 1e-10);
        assert!(step.q.min() > 0.0);
        assert!(step.max_mean_defect <= 1e-8, "{:e}", step.max_mean_defect);
        let det = step.zmap.det_jacobian().unwrap();
        let err = det.sub(&det_target(&step, Model::Sgsw)).sup_norm();
        assert!(err <= 100.0 * params.newton_tol, "{err:e}");
    }

    #[test]
    fn jacobian_modes_agree() {
        let c = cor(8, &f_var());
        let p = PeriodicField::from_fn(c.grid(), |x| 0.01 * (2.0 * PI * x[0]).cos());
        let mut qs = Vec::new();
        for mode in [JacobianMode::PerIterate, JacobianMode::Chord, JacobianMode::FiniteDifference] {
            let params = MAStepParams {
                jacobian: mode,
                ..MAStepParams::default()
            };
            qs.push(ma_solve(&p, 0.01, Model::Sg, &c, &params).unwrap().q);
        }
        assert!(qs[0].sub(&qs[1]).sup_norm() < 1e-10);
        assert!(qs[0].sub(&qs[2]).sup_norm() < 1e-10);
    }

    #[test]
    fn positivity_enforced() {
        let c = cor(8, &f_var());
        let h = PeriodicField::from_fn(c.grid(), |x| 1e-4 + 1e-5 * (2.0 * PI * x[0]).cos());
        let err = ma_solve(&h, 0.01, Model::Sgsw, &c, &MAStepParams::default()).unwrap_err();
        assert!(matches!(err, SgError::PositivityLost { .. }), "{err}");
    }
}
