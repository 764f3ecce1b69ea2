//! Pointwise 2×2 matrix algebra.

use std::ops::{Add, Mul, Neg, Sub};

pub type Vec2 = [f64; 2];

/// Row-major 2×2 matrix; `m[i][j]` is row `i`, column `j`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Mat2(pub [[f64; 2]; 2]);

/// Quarter-turn rotation `[[0, -1], [1, 0]]`.
pub const J: Mat2 = Mat2([[0.0, -1.0], [1.0, 0.0]]);

pub const IDENTITY: Mat2 = Mat2([[1.0, 0.0], [0.0, 1.0]]);

/// Counter-clockwise rotation by angle `a`.
pub fn rotation(a: f64) -> Mat2 {
    let (s, c) = a.sin_cos();
    Mat2([[c, -s], [s, c]])
}

impl Mat2 {
    pub const fn new(a11: f64, a12: f64, a21: f64, a22: f64) -> Self {
        Mat2([[a11, a12], [a21, a22]])
    }

    pub fn zero() -> Self {
        Mat2::default()
    }

    pub fn diag(a: f64, b: f64) -> Self {
        Mat2::new(a, 0.0, 0.0, b)
    }

    /// `u ⊗ v`, entry `(i, j) = u_i v_j`.
    pub fn outer(u: Vec2, v: Vec2) -> Self {
        Mat2([[u[0] * v[0], u[0] * v[1]], [u[1] * v[0], u[1] * v[1]]])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1]
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Mat2([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
    }

    /// Cofactor matrix; `adjugate = cofactor^T`.
    pub fn cofactor(&self) -> Self {
        let m = &self.0;
        Mat2([[m[1][1], -m[1][0]], [-m[0][1], m[0][0]]])
    }

    pub fn inverse(&self) -> Option<Self> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        Some(self.cofactor().transpose().scale(1.0 / d))
    }

    pub fn scale(&self, s: f64) -> Self {
        let m = &self.0;
        Mat2([[m[0][0] * s, m[0][1] * s], [m[1][0] * s, m[1][1] * s]])
    }

    pub fn mul_vec(&self, v: Vec2) -> Vec2 {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1],
            m[1][0] * v[0] + m[1][1] * v[1],
        ]
    }

    pub fn symmetric_part(&self) -> Self {
        let m = &self.0;
        let off = 0.5 * (m[0][1] + m[1][0]);
        Mat2([[m[0][0], off], [off, m[1][1]]])
    }

    /// Smallest eigenvalue of the symmetric part, i.e. the largest `c` with
    /// `ξ·Mξ ≥ c|ξ|²`.
    pub fn sym_min_eig(&self) -> f64 {
        let m = &self.0;
        let a = m[0][0];
        let d = m[1][1];
        let b = 0.5 * (m[0][1] + m[1][0]);
        let mid = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        mid - rad
    }

    /// Spectral norm (largest singular value).
    pub fn norm2(&self) -> f64 {
        let m = &self.0;
        let fro2 = m[0][0] * m[0][0] + m[0][1] * m[0][1] + m[1][0] * m[1][0] + m[1][1] * m[1][1];
        let det = self.det();
        let disc = (fro2 * fro2 - 4.0 * det * det).max(0.0).sqrt();
        (0.5 * (fro2 + disc)).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    fn add(self, o: Mat2) -> Mat2 {
        let (a, b) = (self.0, o.0);
        Mat2([
            [a[0][0] + b[0][0], a[0][1] + b[0][1]],
            [a[1][0] + b[1][0], a[1][1] + b[1][1]],
        ])
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    fn sub(self, o: Mat2) -> Mat2 {
        self + (-o)
    }
}

impl Neg for Mat2 {
    type Output = Mat2;
    fn neg(self) -> Mat2 {
        self.scale(-1.0)
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    fn mul(self, o: Mat2) -> Mat2 {
        let (a, b) = (self.0, o.0);
        let mut out = [[0.0; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Mat2(out)
    }
}

pub fn vsub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn vadd(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn vscale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

pub fn vmax_abs(a: Vec2) -> f64 {
    a[0].abs().max(a[1].abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Mat2, b: Mat2, tol: f64) -> bool {
        (a - b).max_abs() <= tol
    }

    #[test]
    fn rotation_at_zero_is_identity() {
        assert_eq!(rotation(0.0), IDENTITY);
    }

    #[test]
    fn quarter_turn_is_j() {
        assert!(close(rotation(std::f64::consts::FRAC_PI_2), J, 1e-16));
    }

    #[test]
    fn rotation_group_inverse() {
        let r = rotation(0.37) * rotation(-0.37);
        assert!(close(r, IDENTITY, 1e-15));
        assert!((rotation(0.37).det() - 1.0).abs() < 1e-15);
        let rtr = rotation(0.37).transpose() * rotation(0.37);
        assert!(close(rtr, IDENTITY, 1e-15));
    }

    #[test]
    fn rotation_commutes_with_j() {
        let r = rotation(1.1);
        assert!(close(r * J, J * r, 1e-15));
    }

    #[test]
    fn inverse_and_eigs() {
        let m = Mat2::new(2.0, 0.5, -0.3, 1.0);
        let inv = m.inverse().unwrap();
        assert!(close(m * inv, IDENTITY, 1e-15));
        let s = Mat2::new(3.0, 1.0, 1.0, 3.0);
        assert!((s.sym_min_eig() - 2.0).abs() < 1e-15);
        assert!((s.norm2() - 4.0).abs() < 1e-14);
        assert!(Mat2::new(1.0, 2.0, 2.0, 4.0).inverse().is_none());
    }
}
