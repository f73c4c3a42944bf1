//! Random draws shared by the experiment harness, the oracles and the tests.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

/// Uniform draw from the probability simplex, each coordinate at least `floor`
/// (the draw is renormalized after clipping).
pub fn uniform_simplex<R: Rng + ?Sized>(rng: &mut R, m: usize, floor: f64) -> Vec<f64> {
    let mut p: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x = (*x / s).max(floor));
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Uniform draw from `[lo, hi]`.
pub fn uniform_in<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}
