//! Brute-force reference for one time step on small grids.
//!
//! Solves for every `q` sample and every backward-map point `z_i` at once,
//! by dense Newton with a finite-difference Jacobian. Fields are evaluated
//! through a naive DFT interpolant and `∂Q̂` comes from complex-step
//! differentiation of `Q̂` itself, so nothing is shared with the FFT path or
//! the hand-derived perturbation matrices.

use std::f64::consts::PI;
use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::Mat;
use rustfft::num_complex::Complex64 as C64;

use crate::coriolis::CoriolisContext;
use crate::error::{Result, SgError};
use crate::field::PeriodicField;
use crate::linalg::Vec2;
use crate::ma_step::{ma_solve, MAStepParams, Model};

/// Largest grid the oracle accepts.
pub const MAX_ORACLE_N: usize = 8;

const STEP: f64 = 1e-30;

/// Trigonometric interpolant with coefficients from a direct DFT sum.
struct Interp {
    n: usize,
    coef: Vec<C64>,
}

impl Interp {
    fn new(field: &PeriodicField) -> Self {
        let n = field.grid().n();
        let h = n as i64 / 2;
        let s = field.samples();
        let mut coef = Vec::with_capacity(n * n);
        for k1 in -h..h {
            for k2 in -h..h {
                let mut c = C64::new(0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let ph = -2.0 * PI * (k1 * i as i64 + k2 * j as i64) as f64 / n as f64;
                        c += C64::from_polar(s[i * n + j], ph);
                    }
                }
                coef.push(c / (n * n) as f64);
            }
        }
        Interp { n, coef }
    }

    /// `∂₁^a ∂₂^b` at a complex point.
    ///
    /// Conjugate mode pairs are folded into `Re(c e^{iφ}) = c.re cos φ − c.im sin φ`
    /// before continuing to complex `φ`, so the sum is exactly real on the real
    /// axis and a complex step of 1e-30 survives rounding.
    fn eval(&self, x: [C64; 2], order: [u32; 2]) -> C64 {
        let h = self.n as i64 / 2;
        let mut sum = C64::new(0.0, 0.0);
        let mut idx = 0;
        for k1 in -h..h {
            for k2 in -h..h {
                let c = self.coef[idx];
                idx += 1;
                let mut scale = C64::new(1.0, 0.0);
                let mut cosine = C64::new(1.0, 0.0);
                let mut phase = C64::new(0.0, 0.0);
                for (axis, k) in [k1, k2].into_iter().enumerate() {
                    let w = 2.0 * PI * k as f64;
                    let ord = order[axis];
                    if k == -h {
                        // Nyquist modes keep their cosine part only.
                        let th = x[axis] * w;
                        let v = match ord % 4 {
                            0 => th.cos(),
                            1 => -th.sin(),
                            2 => -th.cos(),
                            _ => th.sin(),
                        };
                        cosine *= v * w.powi(ord as i32);
                    } else {
                        scale *= C64::new(0.0, w).powu(ord);
                        phase += x[axis] * w;
                    }
                }
                let cc = c * scale;
                sum += cosine * (phase.cos() * cc.re - phase.sin() * cc.im);
            }
        }
        sum
    }

    fn grad(&self, x: [C64; 2]) -> [C64; 2] {
        [self.eval(x, [1, 0]), self.eval(x, [0, 1])]
    }
}

struct Oracle {
    model: Model,
    dt: f64,
    fi: Interp,
    p: Interp,
    nodes: Vec<Vec2>,
}

fn c2(x: Vec2) -> [C64; 2] {
    [C64::new(x[0], 0.0), C64::new(x[1], 0.0)]
}

impl Oracle {
    /// `Q̂(x, z)` for a given `q` interpolant, at complex arguments.
    fn qhat(&self, q: &Interp, x: [C64; 2], z: [C64; 2]) -> [C64; 2] {
        let fx = self.fi.eval(x, [0, 0]);
        let fz = self.fi.eval(z, [0, 0]);
        let gq = q.grad(x);
        let gp = self.p.grad(z);
        let (s, c) = ((fz.inv() * self.dt).sin(), (fz.inv() * self.dt).cos());
        let rot = [c * gp[0] - s * gp[1], s * gp[0] + c * gp[1]];
        let f2 = fz * fz;
        [
            x[0] + fx * fz * gq[0] - z[0] - f2 * rot[0],
            x[1] + fx * fz * gq[1] - z[1] - f2 * rot[1],
        ]
    }

    /// `∂Q̂` in `x` (`wrt_x`) or in `z`, by complex step.
    fn jac(&self, q: &Interp, x: Vec2, z: Vec2, wrt_x: bool) -> [[f64; 2]; 2] {
        let mut m = [[0.0; 2]; 2];
        for col in 0..2 {
            let (mut xc, mut zc) = (c2(x), c2(z));
            let target = if wrt_x { &mut xc } else { &mut zc };
            target[col].im = STEP;
            let v = self.qhat(q, xc, zc);
            m[0][col] = v[0].im / STEP;
            m[1][col] = v[1].im / STEP;
        }
        m
    }

    fn equations(&self, q: &PeriodicField, z: &[Vec2], lambda: f64) -> Vec<f64> {
        let qi = Interp::new(q);
        let len = self.nodes.len();
        let mut out = vec![0.0; 3 * len];
        for (i, (&x, &zi)) in self.nodes.iter().zip(z).enumerate() {
            let r = self.qhat(&qi, c2(x), c2(zi));
            out[2 * i] = r[0].re;
            out[2 * i + 1] = r[1].re;
            let det = |m: [[f64; 2]; 2]| m[0][0] * m[1][1] - m[0][1] * m[1][0];
            let num = det(self.jac(&qi, x, zi, true));
            let den = det(self.jac(&qi, x, zi, false));
            out[2 * len + i] = match self.model {
                Model::Sg => num / den - 1.0 + lambda,
                Model::Sgsw => self.p.eval(c2(zi), [0, 0]).re * num / den - q.samples()[i],
            };
        }
        out
    }
}

/// Outcome of the brute-force solve.
#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub q: PeriodicField,
    pub z: Vec<Vec2>,
    pub residual: f64,
    pub iterations: usize,
}

/// Solves the coupled step system for `(q, z)` starting from `(p, x)`.
/// SG fixes the gauge with `mean q = 0` and a bordering multiplier.
pub fn coupled_step(p: &PeriodicField, dt: f64, model: Model, cor: &CoriolisContext) -> Result<OracleSolution> {
    let grid = p.grid();
    grid.check_same(&cor.grid())?;
    if grid.n() > MAX_ORACLE_N {
        return Err(SgError::ConfigInvalid(vec![format!(
            "oracle needs n <= {MAX_ORACLE_N}, got {}",
            grid.n()
        )]));
    }
    let oracle = Oracle {
        model,
        dt,
        fi: Interp::new(&cor.f_inv),
        p: Interp::new(p),
        nodes: grid.points(),
    };
    let len = grid.len();
    let bordered = model == Model::Sg;
    let size = 3 * len + usize::from(bordered);
    let mut u: Vec<f64> = Vec::with_capacity(size);
    let q0 = if bordered { p.mean_project() } else { p.clone() };
    u.extend_from_slice(q0.samples());
    for x in &oracle.nodes {
        u.extend_from_slice(x);
    }
    if bordered {
        u.push(0.0);
    }
    let system = |u: &[f64]| -> Result<Vec<f64>> {
        let q = PeriodicField::new(grid, u[..len].to_vec())?;
        let z: Vec<Vec2> = (0..len).map(|i| [u[len + 2 * i], u[len + 2 * i + 1]]).collect();
        let lambda = if bordered { u[3 * len] } else { 0.0 };
        let mut g = oracle.equations(&q, &z, lambda);
        if bordered {
            g.push(u[..len].iter().sum::<f64>() / len as f64);
        }
        Ok(g)
    };
    let sup = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut g = system(&u)?;
    let mut iterations = 0;
    while sup(&g) > 1e-14 {
        if iterations == 40 {
            return Err(SgError::NewtonDiverged {
                iterations,
                residual: sup(&g),
            });
        }
        let h = 1e-6;
        let mut jac = Mat::<f64>::zeros(size, size);
        for k in 0..size {
            let mut up = u.clone();
            up[k] += h;
            let gp = system(&up)?;
            up[k] -= 2.0 * h;
            let gm = system(&up)?;
            for r in 0..size {
                jac[(r, k)] = (gp[r] - gm[r]) / (2.0 * h);
            }
        }
        let mut rhs = Mat::<f64>::from_fn(size, 1, |i, _| -g[i]);
        jac.partial_piv_lu().solve_in_place(rhs.as_mut());
        let mut step = 1.0;
        let before = sup(&g);
        loop {
            let trial: Vec<f64> = u.iter().enumerate().map(|(i, v)| v + step * rhs[(i, 0)]).collect();
            let gt = system(&trial)?;
            if sup(&gt) < before || step < 1e-3 {
                u = trial;
                g = gt;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if sup(&g) >= before {
            break;
        }
    }
    Ok(OracleSolution {
        q: PeriodicField::new(grid, u[..len].to_vec())?,
        z: (0..len).map(|i| [u[len + 2 * i], u[len + 2 * i + 1]]).collect(),
        residual: sup(&g),
        iterations,
    })
}

/// Sup differences between [`ma_solve`] and [`coupled_step`] on one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleComparison {
    pub dq: f64,
    pub dz: f64,
    pub oracle_residual: f64,
    pub oracle_iterations: usize,
}

impl OracleComparison {
    pub fn sup(&self) -> f64 {
        self.dq.max(self.dz)
    }
}

pub fn compare(
    p: &PeriodicField,
    dt: f64,
    model: Model,
    cor: &Arc<CoriolisContext>,
    params: &MAStepParams,
) -> Result<OracleComparison> {
    let sol = coupled_step(p, dt, model, cor)?;
    let step = ma_solve(p, dt, model, cor, params)?;
    let dz = sol
        .z
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let w = step.zmap.node_image(i);
            (w[0] - z[0]).abs().max((w[1] - z[1]).abs())
        })
        .fold(0.0, f64::max);
    Ok(OracleComparison {
        dq: step.q.sub(&sol.q).sup_norm(),
        dz,
        oracle_residual: sol.residual,
        oracle_iterations: sol.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coriolis::TrigPoly;
    use crate::field::GridSpec;
    use crate::ma_step::{convexity, stability_matrix};

    fn setup() -> (Arc<CoriolisContext>, PeriodicField) {
        let g = GridSpec::new(8).unwrap();
        let f = TrigPoly::constant(1.0).with_mode(0, 1, 0.0, 0.1);
        let cor = Arc::new(CoriolisContext::from_poly(g, &f).unwrap());
        let p = PeriodicField::from_fn(g, |x| 0.01 * (2.0 * PI * x[0]).cos());
        (cor, p)
    }

    #[test]
    fn interpolant_reproduces_samples_and_derivatives() {
        let (cor, p) = setup();
        let it = Interp::new(&p);
        let [d1, d2] = p.gradient().unwrap();
        for (idx, x) in p.grid().points().into_iter().enumerate() {
            assert!((it.eval(c2(x), [0, 0]).re - p.samples()[idx]).abs() < 1e-15);
            assert!((it.eval(c2(x), [1, 0]).re - d1.samples()[idx]).abs() < 1e-14);
            assert!((it.eval(c2(x), [0, 1]).re - d2.samples()[idx]).abs() < 1e-14);
        }
        let fi = Interp::new(&cor.f_inv);
        let y = [0.3141, 0.777];
        assert!(fi.eval(c2(y), [0, 0]).im.abs() < 1e-15);
        assert!((fi.eval(c2(y), [0, 0]).re - cor.f_inv.eval(y)).abs() < 1e-14);
    }

    #[test]
    fn matches_ma_solve_sg() {
        let (cor, p) = setup();
        let params = MAStepParams::from_c0(convexity(&stability_matrix(&p, &cor).unwrap()).0);
        let step = ma_solve(&p, 0.01, Model::Sg, &cor, &params).unwrap();
        let sol = coupled_step(&p, 0.01, Model::Sg, &cor).unwrap();
        assert!(sol.residual < 1e-13);
        let dq = step.q.sub(&sol.q).sup_norm();
        assert!(dq <= 1e-8, "sup |q - q_oracle| = {dq:e}");
        let dz = sol
            .z
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let w = step.zmap.node_image(i);
                (w[0] - z[0]).abs().max((w[1] - z[1]).abs())
            })
            .fold(0.0, f64::max);
        assert!(dz <= 1e-8, "sup |z - z_oracle| = {dz:e}");
    }

    #[test]
    fn matches_ma_solve_sgsw() {
        let (cor, p) = setup();
        let h = p.map(|v| 1.0 + v);
        let params = MAStepParams::from_c0(convexity(&stability_matrix(&h, &cor).unwrap()).0);
        let step = ma_solve(&h, 0.01, Model::Sgsw, &cor, &params).unwrap();
        let sol = coupled_step(&h, 0.01, Model::Sgsw, &cor).unwrap();
        let dq = step.q.sub(&sol.q).sup_norm();
        assert!(dq <= 1e-8, "sup |q - q_oracle| = {dq:e}");
    }

    #[test]
    fn rejects_large_grid() {
        let g = GridSpec::new(16).unwrap();
        let cor = CoriolisContext::constant(g, 1.0).unwrap();
        let err = coupled_step(&PeriodicField::zeros(g), 0.01, Model::Sg, &cor).unwrap_err();
        assert!(matches!(err, SgError::ConfigInvalid(_)));
    }
}
