//! Coriolis parameter and trigonometric-polynomial field specifications.

use std::f64::consts::PI;

use crate::error::{Result, SgError};
use crate::field::{GridSpec, PeriodicField, VectorField};
use crate::linalg::Vec2;

/// One Fourier mode `cos_coef·cos(2πk·x) + sin_coef·sin(2πk·x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrigMode {
    pub k: [i64; 2],
    pub cos_coef: f64,
    pub sin_coef: f64,
}

/// `constant + Σ modes`, evaluated exactly at any point.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrigPoly {
    pub constant: f64,
    pub modes: Vec<TrigMode>,
}

impl TrigPoly {
    pub fn constant(c: f64) -> Self {
        TrigPoly {
            constant: c,
            modes: Vec::new(),
        }
    }

    pub fn with_mode(mut self, k1: i64, k2: i64, cos_coef: f64, sin_coef: f64) -> Self {
        self.modes.push(TrigMode {
            k: [k1, k2],
            cos_coef,
            sin_coef,
        });
        self
    }

    pub fn eval(&self, x: Vec2) -> f64 {
        self.constant
            + self
                .modes
                .iter()
                .map(|m| {
                    let ph = 2.0 * PI * (m.k[0] as f64 * x[0] + m.k[1] as f64 * x[1]);
                    m.cos_coef * ph.cos() + m.sin_coef * ph.sin()
                })
                .sum::<f64>()
    }

    /// Largest `|k_i|` over all modes with a nonzero coefficient.
    pub fn max_mode(&self) -> i64 {
        self.modes
            .iter()
            .filter(|m| m.cos_coef != 0.0 || m.sin_coef != 0.0)
            .map(|m| m.k[0].abs().max(m.k[1].abs()))
            .max()
            .unwrap_or(0)
    }

    /// Mean over the torus: the constant plus any `k = 0` cosine terms.
    pub fn mean(&self) -> f64 {
        self.constant
            + self
                .modes
                .iter()
                .filter(|m| m.k == [0, 0])
                .map(|m| m.cos_coef)
                .sum::<f64>()
    }

    /// Exact partial derivative `∂₁^a ∂₂^b`.
    pub fn derivative(&self, order: [usize; 2]) -> TrigPoly {
        let modes = self
            .modes
            .iter()
            .map(|m| {
                // d/dt of (c cos θ + s sin θ) with θ' = w is w(s cos θ − c sin θ)
                let (mut c, mut s) = (m.cos_coef, m.sin_coef);
                for (axis, &ord) in order.iter().enumerate() {
                    let w = 2.0 * PI * m.k[axis] as f64;
                    for _ in 0..ord {
                        (c, s) = (w * s, -w * c);
                    }
                }
                TrigMode {
                    k: m.k,
                    cos_coef: c,
                    sin_coef: s,
                }
            })
            .collect();
        TrigPoly {
            constant: if order == [0, 0] { self.constant } else { 0.0 },
            modes,
        }
    }

    pub fn sample(&self, grid: GridSpec) -> PeriodicField {
        PeriodicField::from_fn(grid, |x| self.eval(x))
    }
}

/// Precomputed `f`, `f⁻¹`, `f⁻²`, `∇(f⁻¹)` on the grid.
#[derive(Clone, Debug)]
pub struct CoriolisContext {
    pub f: PeriodicField,
    pub f_inv: PeriodicField,
    pub f_inv_sq: PeriodicField,
    pub grad_f_inv: VectorField,
    pub f_min: f64,
}

impl CoriolisContext {
    pub fn new(f: PeriodicField) -> Result<Self> {
        f.check_finite("coriolis")?;
        let (f_min, point) = f.min_with_location();
        if f_min <= 0.0 {
            let g = f.grid();
            let x = g.point(g.index(point[0], point[1]));
            return Err(SgError::ConfigInvalid(vec![format!(
                "f not positive: min={f_min} at ({}, {})",
                x[0], x[1]
            )]));
        }
        let f_inv = f.map(|v| 1.0 / v);
        let f_inv_sq = f_inv.map(|v| v * v);
        let grad_f_inv = f_inv.gradient()?;
        Ok(CoriolisContext {
            f,
            f_inv,
            f_inv_sq,
            grad_f_inv,
            f_min,
        })
    }

    pub fn from_poly(grid: GridSpec, poly: &TrigPoly) -> Result<Self> {
        Self::new(poly.sample(grid))
    }

    pub fn constant(grid: GridSpec, f0: f64) -> Result<Self> {
        Self::new(PeriodicField::constant(grid, f0))
    }

    pub fn grid(&self) -> GridSpec {
        self.f.grid()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reciprocal_is_consistent() {
        let g = GridSpec::new(16).unwrap();
        let ctx = CoriolisContext::from_poly(g, &TrigPoly::constant(1.0).with_mode(0, 1, 0.0, 0.1)).unwrap();
        for (a, b) in ctx.f.samples().iter().zip(ctx.f_inv.samples()) {
            assert!((a * b - 1.0).abs() < 1e-12);
        }
        assert!((ctx.f_min - 0.9).abs() < 1e-12);
    }

    #[test]
    fn non_positive_f_is_rejected() {
        let g = GridSpec::new(8).unwrap();
        let err = CoriolisContext::constant(g, 0.0).unwrap_err();
        assert!(err.to_string().contains("f not positive"));
    }

    #[test]
    fn trig_poly_mean_and_modes() {
        let p = TrigPoly::constant(0.5).with_mode(2, -1, 1.0, 0.0).with_mode(0, 0, 0.25, 0.0);
        assert_eq!(p.max_mode(), 2);
        assert_eq!(p.mean(), 0.75);
        let g = GridSpec::new(16).unwrap();
        assert!((p.sample(g).mean() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn derivative_matches_spectral() {
        let p = TrigPoly::constant(0.3).with_mode(2, -1, 0.4, -0.2).with_mode(1, 3, 0.0, 0.7);
        let g = GridSpec::new(16).unwrap();
        let field = p.sample(g);
        for order in [[1, 0], [0, 1], [2, 0], [1, 1], [0, 3]] {
            let want = field.derivative(order).unwrap();
            let got = p.derivative(order).sample(g);
            let scale = want.sup_norm().max(1.0);
            assert!(want.sub(&got).sup_norm() < 1e-12 * scale, "{order:?}");
        }
    }
}
