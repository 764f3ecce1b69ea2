//! Torus self-maps stored as identity plus a periodic displacement.

use rayon::prelude::*;

use crate::error::{Result, SgError};
use crate::field::{GridSpec, MatrixField, PeriodicField, SpectralBundle};
use crate::linalg::{vadd, vmax_abs, vscale, vsub, Mat2, Vec2, IDENTITY};

/// `x ↦ x + w(x)` with `w` Z²-periodic, so `map(x + h) = map(x) + h` holds by
/// construction for every `h ∈ Z²`.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicMap {
    w: [PeriodicField; 2],
    diffeo_certified: bool,
}

impl PeriodicMap {
    pub fn identity(grid: GridSpec) -> Self {
        PeriodicMap {
            w: [PeriodicField::zeros(grid), PeriodicField::zeros(grid)],
            diffeo_certified: true,
        }
    }

    /// Translation `x ↦ x + c`.
    pub fn shift(grid: GridSpec, c: Vec2) -> Self {
        PeriodicMap {
            w: [
                PeriodicField::constant(grid, c[0]),
                PeriodicField::constant(grid, c[1]),
            ],
            diffeo_certified: true,
        }
    }

    pub fn from_displacement(w1: PeriodicField, w2: PeriodicField) -> Result<Self> {
        w1.grid().check_same(&w2.grid())?;
        Ok(PeriodicMap {
            w: [w1, w2],
            diffeo_certified: false,
        })
    }

    pub(crate) fn from_displacement_samples(grid: GridSpec, disp: &[Vec2]) -> Self {
        let w1 = PeriodicField::from_vec_unchecked(grid, disp.iter().map(|d| d[0]).collect());
        let w2 = PeriodicField::from_vec_unchecked(grid, disp.iter().map(|d| d[1]).collect());
        PeriodicMap {
            w: [w1, w2],
            diffeo_certified: false,
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.w[0].grid()
    }

    pub fn displacement(&self) -> &[PeriodicField; 2] {
        &self.w
    }

    pub fn is_diffeo_certified(&self) -> bool {
        self.diffeo_certified
    }

    /// Flags the map as a diffeomorphism if `det(I + Dw) > 0` at every node.
    pub fn certify(mut self) -> Result<Self> {
        let det = self.det_jacobian()?;
        let (min, point) = det.min_with_location();
        if min <= 0.0 {
            return Err(SgError::DegenerateDeterminant { point, value: min });
        }
        self.diffeo_certified = true;
        Ok(self)
    }

    pub(crate) fn mark_certified(mut self) -> Self {
        self.diffeo_certified = true;
        self
    }

    /// Sup norm of the displacement `map − id`.
    pub fn displacement_sup(&self) -> f64 {
        self.w[0].sup_norm().max(self.w[1].sup_norm())
    }

    /// Image of grid node `idx`.
    pub fn node_image(&self, idx: usize) -> Vec2 {
        let x = self.grid().point(idx);
        [x[0] + self.w[0].samples()[idx], x[1] + self.w[1].samples()[idx]]
    }

    pub fn node_images(&self) -> Vec<Vec2> {
        (0..self.grid().len()).map(|i| self.node_image(i)).collect()
    }

    pub fn evaluator(&self) -> MapEvaluator {
        MapEvaluator {
            bundle: SpectralBundle::new(&[&self.w[0], &self.w[1]]),
        }
    }

    /// `map(x)` at an arbitrary point.
    pub fn apply(&self, x: Vec2) -> Vec2 {
        self.evaluator().apply(x)
    }

    /// `DF = I + Dw` with spectral `Dw`.
    pub fn jacobian(&self) -> Result<MatrixField> {
        let [a, b] = self.w[0].gradient()?;
        let [c, d] = self.w[1].gradient()?;
        let grid = self.grid();
        Ok(MatrixField::from_fn(grid, |i| {
            Mat2::new(
                1.0 + a.samples()[i],
                b.samples()[i],
                c.samples()[i],
                1.0 + d.samples()[i],
            )
        }))
    }

    pub fn det_jacobian(&self) -> Result<PeriodicField> {
        Ok(self.jacobian()?.det())
    }

    /// Sup distance between two maps at the grid nodes.
    pub fn distance(&self, other: &PeriodicMap) -> f64 {
        let d0 = self.w[0].sub(&other.w[0]).sup_norm();
        let d1 = self.w[1].sub(&other.w[1]).sup_norm();
        d0.max(d1)
    }
}

/// Off-grid evaluation of a map's displacement.
pub struct MapEvaluator {
    bundle: SpectralBundle,
}

impl MapEvaluator {
    pub fn displacement(&self, x: Vec2) -> Vec2 {
        let mut out = [0.0; 2];
        self.bundle.eval_into(x, &mut out);
        out
    }

    pub fn apply(&self, x: Vec2) -> Vec2 {
        vadd(x, self.displacement(x))
    }
}

/// `outer ∘ inner`, sampled at the grid nodes.
pub fn compose(outer: &PeriodicMap, inner: &PeriodicMap) -> Result<PeriodicMap> {
    outer.grid().check_same(&inner.grid())?;
    let grid = inner.grid();
    let eval = outer.evaluator();
    let disp: Vec<Vec2> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let y = inner.node_image(idx);
            let w_in = [inner.w[0].samples()[idx], inner.w[1].samples()[idx]];
            vadd(w_in, eval.displacement(y))
        })
        .collect();
    let mut out = PeriodicMap::from_displacement_samples(grid, &disp);
    out.diffeo_certified = outer.diffeo_certified && inner.diffeo_certified;
    Ok(out)
}

/// Outcome of a damped 2-D Newton solve.
pub(crate) enum NewtonOutcome {
    Converged { x: Vec2 },
    Failed { iterations: usize, residual: f64 },
}

/// Damped Newton for `F(x) = 0` in R². `eval` returns `(F(x), DF(x))`. A step
/// that does not reduce `max|F|` is halved up to `halvings` times. Once
/// `max|F| ≤ tol`, one further full step is taken and kept if it does not
/// increase the residual, so warm starts just inside `tol` still converge to
/// round-off rather than stopping at the tolerance.
pub(crate) fn damped_newton(
    x0: Vec2,
    tol: f64,
    max_iter: usize,
    halvings: usize,
    mut eval: impl FnMut(Vec2) -> (Vec2, Mat2),
) -> NewtonOutcome {
    let mut x = x0;
    let (mut r, mut jac) = eval(x);
    let mut res = vmax_abs(r);
    for it in 0..max_iter {
        if res <= tol {
            if let Some(inv) = jac.inverse() {
                let xn = vsub(x, inv.mul_vec(r));
                if vmax_abs(eval(xn).0) <= res {
                    x = xn;
                }
            }
            return NewtonOutcome::Converged { x };
        }
        let Some(inv) = jac.inverse() else {
            return NewtonOutcome::Failed {
                iterations: it,
                residual: res,
            };
        };
        let step = inv.mul_vec(r);
        let mut lam = 1.0;
        let mut accepted = false;
        for _ in 0..=halvings {
            let xn = vsub(x, vscale(step, lam));
            let (rn, jn) = eval(xn);
            let resn = vmax_abs(rn);
            if resn < res || resn <= tol {
                x = xn;
                r = rn;
                jac = jn;
                res = resn;
                accepted = true;
                break;
            }
            lam *= 0.5;
        }
        if !accepted {
            return NewtonOutcome::Failed {
                iterations: it + 1,
                residual: res,
            };
        }
    }
    if res <= tol {
        NewtonOutcome::Converged { x }
    } else {
        NewtonOutcome::Failed {
            iterations: max_iter,
            residual: res,
        }
    }
}

/// Pointwise Newton inverse: for each node `x`, the `y` with `map(y) = x`.
pub fn invert_map(map: &PeriodicMap, tol: f64, max_iter: usize) -> Result<PeriodicMap> {
    let grid = map.grid();
    let map = if map.diffeo_certified {
        map.clone()
    } else {
        map.clone().certify()?
    };
    let [w1, w2] = &map.w;
    let bundle = SpectralBundle::with_derivatives(&[
        (w1, [0, 0]),
        (w2, [0, 0]),
        (w1, [1, 0]),
        (w1, [0, 1]),
        (w2, [1, 0]),
        (w2, [0, 1]),
    ]);
    let results: Vec<std::result::Result<Vec2, (usize, f64)>> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let x = grid.point(idx);
            let guess = vsub(x, [w1.samples()[idx], w2.samples()[idx]]);
            let mut buf = [0.0; 6];
            let outcome = damped_newton(guess, tol, max_iter, 8, |y| {
                bundle.eval_into(y, &mut buf);
                let r = [y[0] + buf[0] - x[0], y[1] + buf[1] - x[1]];
                let jac = IDENTITY + Mat2::new(buf[2], buf[3], buf[4], buf[5]);
                (r, jac)
            });
            match outcome {
                NewtonOutcome::Converged { x: y } => Ok(vsub(y, x)),
                NewtonOutcome::Failed {
                    iterations,
                    residual,
                } => Err((iterations, residual)),
            }
        })
        .collect();
    let mut disp = Vec::with_capacity(grid.len());
    for (idx, r) in results.into_iter().enumerate() {
        match r {
            Ok(d) => disp.push(d),
            Err((iterations, residual)) => {
                return Err(SgError::MapSolveFailed {
                    point: grid.coords(idx),
                    iterations,
                    residual,
                })
            }
        }
    }
    Ok(PeriodicMap::from_displacement_samples(grid, &disp).certify()?)
}
