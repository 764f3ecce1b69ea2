//! Deterministic pseudo-random smooth data for tests.

use rand::rngs::StdRng;
use rand::{Rng as _, SeedableRng};

use crate::coriolis::TrigPoly;

/// Seeded generator with a symmetric uniform draw.
pub struct Rng(StdRng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(StdRng::seed_from_u64(seed))
    }

    /// Uniform on `[-1, 1)`.
    pub fn sym(&mut self) -> f64 {
        self.0.random_range(-1.0..1.0)
    }
}

/// Mean-zero trigonometric polynomial with modes `|k_i| ≤ max_mode` and
/// coefficients of size at most `amp`.
pub fn random_trig(rng: &mut Rng, max_mode: i64, amp: f64) -> TrigPoly {
    let mut p = TrigPoly::constant(0.0);
    for k1 in 0..=max_mode {
        for k2 in -max_mode..=max_mode {
            if k1 == 0 && k2 <= 0 {
                continue;
            }
            p = p.with_mode(k1, k2, amp * rng.sym(), amp * rng.sym());
        }
    }
    p
}
