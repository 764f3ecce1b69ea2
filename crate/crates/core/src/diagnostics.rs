//! Eulerian reconstruction from discrete states and residual probes along
//! stored trajectories.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::coriolis::CoriolisContext;
use crate::elliptic::{divergence, DivergenceOperator};
use crate::error::{Result, SgError};
use crate::field::{MatrixField, PeriodicField, SpectralBundle, VectorField};
use crate::linalg::{Mat2, Vec2};
use crate::ma_step::{convexity, stability_matrix, Model};
use crate::stepper::{run, StepState, Trajectory};

/// Velocities, the time derivative and the residuals of one state.
#[derive(Clone, Debug)]
pub struct EulerianSnapshot {
    pub u_g: VectorField,
    pub u: VectorField,
    /// `∂ₜp` (SG) or `∂ₜh` (SGSW).
    pub dt_field: PeriodicField,
    /// `D_t u_g + ∇p + fJu`.
    pub residual_momentum: VectorField,
    /// `∇·u` (SG) or `∂ₜh + ∇·(hu)` (SGSW).
    pub residual_mass: PeriodicField,
}

impl EulerianSnapshot {
    pub fn mass_sup(&self) -> f64 {
        self.residual_mass.sup_norm()
    }

    pub fn momentum_sup(&self) -> f64 {
        self.residual_momentum[0].sup_norm().max(self.residual_momentum[1].sup_norm())
    }
}

/// `u_g = f⁻¹·(−∂₂p, ∂₁p)`.
pub fn geostrophic_velocity(p: &PeriodicField, cor: &CoriolisContext) -> Result<VectorField> {
    cor.grid().check_same(&p.grid())?;
    let [p1, p2] = p.gradient()?;
    Ok([cor.f_inv.mul(&p2).scale(-1.0), cor.f_inv.mul(&p1)])
}

/// Pointwise `S⁻¹`, after checking that the symmetric part of `S` is
/// positive definite (and, for SGSW, that `h > 0`).
fn inverse_stability(p: &PeriodicField, model: Model, cor: &CoriolisContext) -> Result<MatrixField> {
    if model == Model::Sgsw {
        let (min, point) = p.min_with_location();
        if !(min > 0.0) {
            return Err(SgError::PositivityLost { min, floor: 0.0, point });
        }
    }
    let s = stability_matrix(p, cor)?;
    let (min_eig, point) = convexity(&s);
    if !(min_eig > 0.0) {
        return Err(SgError::ConvexityLost {
            min_eig,
            floor: 0.0,
            point,
        });
    }
    let inv: Vec<Mat2> = s.mats().iter().map(|m| m.inverse().expect("positive definite")).collect();
    Ok(MatrixField::from_mats(p.grid(), &inv))
}

fn scale_matrix(m: &MatrixField, w: &PeriodicField) -> MatrixField {
    MatrixField {
        m11: m.m11.mul(w),
        m12: m.m12.mul(w),
        m21: m.m21.mul(w),
        m22: m.m22.mul(w),
    }
}

fn mat_vec(m: &MatrixField, v: &VectorField) -> VectorField {
    [
        m.m11.mul(&v[0]).add(&m.m12.mul(&v[1])),
        m.m21.mul(&v[0]).add(&m.m22.mul(&v[1])),
    ]
}

/// Solves the diagnostic elliptic equation for the time derivative of the
/// state field, to tolerance `tol`.
///
/// SG: `∇·[S⁻¹f⁻²∇w] = ∇·[S⁻¹f⁻¹J∇p]` with `mean(w) = 0`.
/// SGSW: `∇·[S⁻¹f⁻²h∇w] − w = ∇·[S⁻¹f⁻¹hJ∇h]`.
pub fn dt_field(p: &PeriodicField, model: Model, cor: &CoriolisContext, tol: f64) -> Result<PeriodicField> {
    let s_inv = inverse_stability(p, model, cor)?;
    Ok(solve_dt(p, model, cor, &s_inv, tol)?.0)
}

fn solve_dt(
    p: &PeriodicField,
    model: Model,
    cor: &CoriolisContext,
    s_inv: &MatrixField,
    tol: f64,
) -> Result<(PeriodicField, f64)> {
    let weight = match model {
        Model::Sg => cor.f_inv.clone(),
        Model::Sgsw => cor.f_inv.mul(p),
    };
    let k = scale_matrix(s_inv, &weight.mul(&cor.f_inv));
    let ug = geostrophic_velocity(p, cor)?;
    // f⁻¹J∇p = u_g, so the flux is S⁻¹·(weight·f)·u_g
    let flux = mat_vec(s_inv, &[ug[0].mul(&weight).mul(&cor.f), ug[1].mul(&weight).mul(&cor.f)]);
    let rhs = divergence(&flux)?;
    let op = match model {
        Model::Sg => DivergenceOperator::new(&k)?,
        Model::Sgsw => DivergenceOperator::with_zero_order(&k, -1.0)?,
    };
    let sol = op.solve_krylov(&rhs, tol)?;
    Ok((sol.u, sol.residual))
}

/// `u = S⁻¹(f⁻¹J∇p − f⁻²∇w)` where `w` is the time derivative of `p`.
pub fn physical_velocity(
    p: &PeriodicField,
    w: &PeriodicField,
    model: Model,
    cor: &CoriolisContext,
) -> Result<VectorField> {
    let s_inv = inverse_stability(p, model, cor)?;
    velocity_with(p, w, cor, &s_inv)
}

fn velocity_with(p: &PeriodicField, w: &PeriodicField, cor: &CoriolisContext, s_inv: &MatrixField) -> Result<VectorField> {
    let ug = geostrophic_velocity(p, cor)?;
    let [w1, w2] = w.gradient()?;
    let inner = [
        ug[0].sub(&cor.f_inv_sq.mul(&w1)),
        ug[1].sub(&cor.f_inv_sq.mul(&w2)),
    ];
    Ok(mat_vec(s_inv, &inner))
}

/// Velocities, `∂ₜ` field and residuals of `p` under `model`.
pub fn eulerian(p: &PeriodicField, model: Model, cor: &CoriolisContext, tol: f64) -> Result<EulerianSnapshot> {
    let s_inv = inverse_stability(p, model, cor)?;
    let (w, _) = solve_dt(p, model, cor, &s_inv, tol)?;
    let u = velocity_with(p, &w, cor, &s_inv)?;
    let u_g = geostrophic_velocity(p, cor)?;
    let residual_mass = match model {
        Model::Sg => divergence(&u)?,
        Model::Sgsw => w.add(&divergence(&[p.mul(&u[0]), p.mul(&u[1])])?),
    };
    let dt_ug = geostrophic_velocity(&w, cor)?;
    let [p1, p2] = p.gradient()?;
    let mut residual_momentum = [p1, p2];
    for (a, r) in residual_momentum.iter_mut().enumerate() {
        let [g1, g2] = u_g[a].gradient()?;
        let advect = u[0].mul(&g1).add(&u[1].mul(&g2));
        // (fJu)_1 = −f u_2, (fJu)_2 = f u_1
        let coriolis = if a == 0 {
            cor.f.mul(&u[1]).scale(-1.0)
        } else {
            cor.f.mul(&u[0])
        };
        *r = r.add(&dt_ug[a]).add(&advect).add(&coriolis);
    }
    Ok(EulerianSnapshot {
        u_g,
        u,
        dt_field: w,
        residual_momentum,
        residual_mass,
    })
}

/// Snapshots that form a uniformly spaced leading run, plus their spacing.
fn uniform_prefix(traj: &Trajectory) -> Result<(&[StepState], f64)> {
    let snaps = &traj.snapshots;
    if snaps.len() < 3 {
        return Err(SgError::InsufficientSnapshots {
            needed: 3,
            got: snaps.len(),
        });
    }
    let h = snaps[1].t - snaps[0].t;
    let mut end = 2;
    while end < snaps.len() && ((snaps[end].t - snaps[end - 1].t) - h).abs() <= 1e-9 * h {
        end += 1;
    }
    if end < 3 || !(h > 0.0) {
        return Err(SgError::InsufficientSnapshots { needed: 3, got: end });
    }
    Ok((&snaps[..end], h))
}

/// Particle positions `φ(x₀)` at the nodes, unwrapped so that differences in
/// time never jump by a period.
fn positions(state: &StepState) -> Vec<Vec2> {
    let grid = state.field.grid();
    let [d1, d2] = state.flow.displacement();
    (0..grid.len())
        .map(|i| {
            let x = grid.point(i);
            [x[0] + d1.samples()[i], x[1] + d2.samples()[i]]
        })
        .collect()
}

/// Values of `fields` at the points `at`.
fn sample_at(fields: &[&PeriodicField], at: &[Vec2]) -> Vec<Vec<f64>> {
    let bundle = SpectralBundle::new(fields);
    at.par_iter()
        .map(|&x| {
            let mut out = vec![0.0; fields.len()];
            bundle.eval_into(x, &mut out);
            out
        })
        .collect()
}

struct Particles {
    phi: Vec<Vec2>,
    /// `u_g(φ)`.
    vg: Vec<Vec2>,
    /// `f⁻¹(φ)`.
    fi: Vec<f64>,
    /// `∇p(φ)`.
    grad: Vec<Vec2>,
}

fn particles(state: &StepState, cor: &CoriolisContext) -> Result<Particles> {
    let phi = positions(state);
    let [g1, g2] = state.field.gradient()?;
    let ug = geostrophic_velocity(&state.field, cor)?;
    let vals = sample_at(&[&ug[0], &ug[1], &cor.f_inv, &g1, &g2], &phi);
    Ok(Particles {
        vg: vals.iter().map(|v| [v[0], v[1]]).collect(),
        fi: vals.iter().map(|v| v[2]).collect(),
        grad: vals.iter().map(|v| [v[3], v[4]]).collect(),
        phi,
    })
}

fn all_particles(snaps: &[StepState], cor: &CoriolisContext) -> Result<Vec<Particles>> {
    snaps.par_iter().map(|s| particles(s, cor)).collect()
}

/// Time series `(t, sup|Δₜφ + (−J)f⁻¹(φ)Δₜv_g − v_g|)` at interior snapshot
/// times, with centered differences along particle labels.
pub fn lagrangian_residual(traj: &Trajectory, cor: &CoriolisContext) -> Result<Vec<(f64, f64)>> {
    let (snaps, h) = uniform_prefix(traj)?;
    let parts = all_particles(snaps, cor)?;
    Ok((1..snaps.len() - 1)
        .map(|k| {
            let (prev, cur, next) = (&parts[k - 1], &parts[k], &parts[k + 1]);
            let sup = (0..cur.phi.len())
                .map(|i| {
                    let r: Vec<f64> = (0..2)
                        .map(|a| {
                            let dphi = (next.phi[i][a] - prev.phi[i][a]) / (2.0 * h);
                            let dv = [
                                (next.vg[i][0] - prev.vg[i][0]) / (2.0 * h),
                                (next.vg[i][1] - prev.vg[i][1]) / (2.0 * h),
                            ];
                            // −J(a, b) = (b, −a)
                            let mj = if a == 0 { dv[1] } else { -dv[0] };
                            dphi + cur.fi[i] * mj - cur.vg[i][a]
                        })
                        .collect();
                    r[0].abs().max(r[1].abs())
                })
                .fold(0.0_f64, f64::max);
            (snaps[k].t, sup)
        })
        .collect())
}

/// Time series `(t, sup|Δₜ(∇P∘φ) − J(∇P∘φ − φ)|)` with `P = p + |x|²/2`.
/// Only meaningful for `f ≡ 1`, which is checked.
pub fn dual_residual(traj: &Trajectory, cor: &CoriolisContext) -> Result<Vec<(f64, f64)>> {
    let dev = cor.f.map(|v| v - 1.0).sup_norm();
    if dev > 1e-14 {
        return Err(SgError::ConfigInvalid(vec![format!(
            "dual-form residual needs f ≡ 1, found sup|f − 1| = {dev:e}"
        )]));
    }
    let (snaps, h) = uniform_prefix(traj)?;
    let parts = all_particles(snaps, cor)?;
    let dual = |p: &Particles, i: usize, a: usize| p.grad[i][a] + p.phi[i][a];
    Ok((1..snaps.len() - 1)
        .map(|k| {
            let (prev, cur, next) = (&parts[k - 1], &parts[k], &parts[k + 1]);
            let sup = (0..cur.phi.len())
                .map(|i| {
                    let d0 = (dual(next, i, 0) - dual(prev, i, 0)) / (2.0 * h);
                    let d1 = (dual(next, i, 1) - dual(prev, i, 1)) / (2.0 * h);
                    // J(a, b) = (−b, a) applied to ∇p(φ)
                    let g = cur.grad[i];
                    (d0 + g[1]).abs().max((d1 - g[0]).abs())
                })
                .fold(0.0_f64, f64::max);
            (snaps[k].t, sup)
        })
        .collect())
}

/// Time series `(t, sup|Δₜφ − u∘φ|)`: the gap between the Eulerian velocity
/// and the particle velocity of the stored flow.
pub fn velocity_consistency(traj: &Trajectory, model: Model, cor: &CoriolisContext, tol: f64) -> Result<Vec<(f64, f64)>> {
    let (snaps, h) = uniform_prefix(traj)?;
    let phis: Vec<Vec<Vec2>> = snaps.iter().map(positions).collect();
    (1..snaps.len() - 1)
        .into_par_iter()
        .map(|k| {
            let e = eulerian(&snaps[k].field, model, cor, tol)?;
            let u = sample_at(&[&e.u[0], &e.u[1]], &phis[k]);
            let sup = (0..u.len())
                .map(|i| {
                    let d0 = (phis[k + 1][i][0] - phis[k - 1][i][0]) / (2.0 * h) - u[i][0];
                    let d1 = (phis[k + 1][i][1] - phis[k - 1][i][1]) / (2.0 * h) - u[i][1];
                    d0.abs().max(d1.abs())
                })
                .fold(0.0_f64, f64::max);
            Ok((snaps[k].t, sup))
        })
        .collect()
}

/// Time series `(t, sup|p₁(t) − p₂(t)|)` for two runs sampled at the same times.
pub fn stability_series(cfg_a: &RunConfig, cfg_b: &RunConfig) -> Result<Vec<(f64, f64)>> {
    let same = cfg_a.model == cfg_b.model
        && cfg_a.n == cfg_b.n
        && cfg_a.dt == cfg_b.dt
        && cfg_a.t_end == cfg_b.t_end
        && cfg_a.snapshot_every == cfg_b.snapshot_every;
    if !same {
        return Err(SgError::ConfigInvalid(vec![
            "stability probe needs configs that differ only in initial data".to_string(),
        ]));
    }
    let (a, b) = rayon::join(|| run(cfg_a), || run(cfg_b));
    let (a, b) = (a?, b?);
    Ok(a.snapshots
        .iter()
        .zip(&b.snapshots)
        .map(|(x, y)| (x.t, x.field.sub(&y.field).sup_norm()))
        .collect())
}

/// `max_t sup|p₁(t) − p₂(t)| / ε` with `ε = sup|p₁(0) − p₂(0)|`.
pub fn stability_probe(cfg_a: &RunConfig, cfg_b: &RunConfig) -> Result<f64> {
    let series = stability_series(cfg_a, cfg_b)?;
    let eps = series.first().map_or(0.0, |s| s.1);
    let max = series.iter().map(|s| s.1).fold(0.0_f64, f64::max);
    Ok(match (eps > 0.0, max > 0.0) {
        (_, false) => 0.0,
        (true, true) => max / eps,
        (false, true) => f64::INFINITY,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coriolis::TrigPoly;
    use crate::elliptic::apply_divform;
    use crate::field::GridSpec;
    use std::f64::consts::PI;

    fn grid(n: usize) -> GridSpec {
        GridSpec::new(n).unwrap()
    }

    fn variable_f(g: GridSpec) -> CoriolisContext {
        CoriolisContext::from_poly(g, &TrigPoly::constant(1.0).with_mode(0, 1, 0.0, 0.1).with_mode(1, 1, 0.05, 0.0))
            .unwrap()
    }

    fn smooth_p(g: GridSpec) -> PeriodicField {
        PeriodicField::from_fn(g, |x| {
            0.01 * ((2.0 * PI * x[0]).cos() + (2.0 * PI * x[1]).sin()) + 0.004 * (2.0 * PI * (x[0] + x[1])).sin()
        })
    }

    #[test]
    fn zero_pressure_has_zero_velocity() {
        let g = grid(16);
        let cor = variable_f(g);
        let p = PeriodicField::zeros(g);
        let e = eulerian(&p, Model::Sg, &cor, 1e-10).unwrap();
        assert_eq!(e.u_g[0].sup_norm() + e.u_g[1].sup_norm(), 0.0);
        assert_eq!(e.u[0].sup_norm() + e.u[1].sup_norm(), 0.0);
        assert_eq!(e.dt_field.sup_norm(), 0.0);
    }

    #[test]
    fn single_sine_mode_velocity() {
        let g = grid(16);
        let cor = CoriolisContext::constant(g, 1.0).unwrap();
        let p = PeriodicField::from_fn(g, |x| (2.0 * PI * x[0]).sin() / (2.0 * PI));
        let ug = geostrophic_velocity(&p, &cor).unwrap();
        assert!(ug[0].at(0, 0).abs() < 1e-12);
        assert!((ug[1].at(0, 0) - 1.0).abs() < 1e-12);
        let expected = PeriodicField::from_fn(g, |x| (2.0 * PI * x[0]).cos());
        assert!(ug[1].sub(&expected).sup_norm() < 1e-12);
    }

    #[test]
    fn geostrophic_inverse_identity() {
        let g = grid(16);
        let cor = variable_f(g);
        let p = smooth_p(g);
        let ug = geostrophic_velocity(&p, &cor).unwrap();
        let [p1, p2] = p.gradient().unwrap();
        // J⁻¹(a, b) = (b, −a)
        let back = [cor.f.mul(&ug[1]), cor.f.mul(&ug[0]).scale(-1.0)];
        assert!(back[0].sub(&p1).sup_norm() < 1e-12);
        assert!(back[1].sub(&p2).sup_norm() < 1e-12);
    }

    #[test]
    fn single_cosine_mode_is_steady() {
        let g = grid(16);
        let cor = CoriolisContext::constant(g, 1.0).unwrap();
        let p = PeriodicField::from_fn(g, |x| 0.02 * (2.0 * PI * x[0]).cos());
        let w = dt_field(&p, Model::Sg, &cor, 1e-10).unwrap();
        assert!(w.sup_norm() < 1e-12, "{}", w.sup_norm());
    }

    #[test]
    fn manufactured_dt_field_is_recovered() {
        let g = grid(16);
        let cor = variable_f(g);
        let p = smooth_p(g);
        let s_inv = inverse_stability(&p, Model::Sg, &cor).unwrap();
        let k = scale_matrix(&s_inv, &cor.f_inv_sq);
        let w_star = PeriodicField::from_fn(g, |x| (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos() + 0.3 * (4.0 * PI * x[1]).cos());
        let rhs = apply_divform(&k, &w_star).unwrap();
        let w = DivergenceOperator::new(&k).unwrap().solve_krylov(&rhs, 1e-12).unwrap().u;
        assert!(w.sub(&w_star).sup_norm() < 1e-7);
        let kh = scale_matrix(&k, &p.map(|v| 1.0 + v));
        let rhs = apply_divform(&kh, &w_star).unwrap().sub(&w_star);
        let op = DivergenceOperator::with_zero_order(&kh, -1.0).unwrap();
        let w = op.solve_krylov(&rhs, 1e-12).unwrap().u;
        assert!(w.sub(&w_star).sup_norm() < 1e-7);
        let w = op.solve(&rhs, 1e-12).unwrap().u;
        assert!(w.sub(&w_star).sup_norm() < 1e-7);
    }

    fn mass_residual(model: Model, tol: f64) -> f64 {
        let g = grid(16);
        let cor = variable_f(g);
        let p = match model {
            Model::Sg => smooth_p(g),
            Model::Sgsw => smooth_p(g).map(|v| 1.0 + v),
        };
        eulerian(&p, model, &cor, tol).unwrap().mass_sup()
    }

    #[test]
    fn divergence_residual_tracks_tolerance() {
        for model in [Model::Sg, Model::Sgsw] {
            let coarse = mass_residual(model, 1e-6);
            let fine = mass_residual(model, 1e-9);
            assert!(coarse <= 50.0 * 1e-6, "{model:?} {coarse:e}");
            assert!(fine <= 50.0 * 1e-9, "{model:?} {fine:e}");
            assert!(fine < coarse, "{model:?} {fine:e} {coarse:e}");
        }
    }

    #[test]
    fn momentum_residual_is_spectrally_small() {
        // the residual is an aliasing gap between two product-rule orderings
        let res = |n: usize| {
            let g = grid(n);
            let cor = variable_f(g);
            eulerian(&smooth_p(g), Model::Sg, &cor, 1e-12).unwrap().momentum_sup()
        };
        let (coarse, fine) = (res(16), res(32));
        assert!(coarse < 1e-7, "{coarse:e}");
        assert!(fine < 1e-3 * coarse, "{fine:e} {coarse:e}");
    }

    #[test]
    fn lagrangian_needs_three_snapshots() {
        let cfg = RunConfig::minimal(Model::Sg, 8, 0.01, 0.01);
        let traj = run(&cfg).unwrap();
        let cor = cfg.coriolis().unwrap();
        assert!(matches!(
            lagrangian_residual(&traj, &cor),
            Err(SgError::InsufficientSnapshots { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn zero_run_has_zero_residuals() {
        let mut cfg = RunConfig::minimal(Model::Sg, 8, 0.01, 0.04);
        cfg.f_spec = TrigPoly::constant(1.0);
        let traj = run(&cfg).unwrap();
        let cor = cfg.coriolis().unwrap();
        for (_, r) in lagrangian_residual(&traj, &cor).unwrap() {
            assert_eq!(r, 0.0);
        }
        for (_, r) in dual_residual(&traj, &cor).unwrap() {
            assert_eq!(r, 0.0);
        }
    }

    #[test]
    fn dual_residual_rejects_variable_f() {
        let mut cfg = RunConfig::minimal(Model::Sg, 8, 0.01, 0.04);
        cfg.f_spec = TrigPoly::constant(1.0).with_mode(0, 1, 0.0, 0.1);
        let traj = run(&cfg).unwrap();
        let cor = cfg.coriolis().unwrap();
        assert!(matches!(dual_residual(&traj, &cor), Err(SgError::ConfigInvalid(_))));
    }

    #[test]
    fn identical_configs_probe_to_zero() {
        let mut cfg = RunConfig::minimal(Model::Sg, 8, 0.01, 0.03);
        cfg.init_spec = TrigPoly::constant(0.0).with_mode(1, 0, 0.005, 0.0);
        assert_eq!(stability_probe(&cfg, &cfg.clone()).unwrap(), 0.0);
    }
}
