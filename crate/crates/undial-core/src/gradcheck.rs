//! Central finite-difference gradient verification.
//!
//! Every differentiable primitive and every training loss is checked against
//! this oracle. The loss closure must rebuild the graph from raw input data
//! so the numeric side stays independent of any recorded tape.

use crate::rng::Pcg32;

/// Default step for central differences.
pub const FD_STEP: f32 = 1e-3;

/// Relative-error tolerance used by the standard checks.
pub const FD_TOL: f64 = 1e-3;

/// Relative error with an absolute floor of 1: |a - b| / max(1, |a|, |b|).
/// The floor keeps f32 forward rounding from dominating near-zero entries.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central finite differences of `loss` w.r.t. `input`, step `h`.
pub fn numeric_grad(input: &[f32], h: f32, mut loss: impl FnMut(&[f32]) -> f64) -> Vec<f64> {
    let mut x = input.to_vec();
    let mut grad = Vec::with_capacity(input.len());
    for i in 0..input.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss(&x);
        x[i] = orig - h;
        let down = loss(&x);
        x[i] = orig;
        grad.push((up - down) / (2.0 * h as f64));
    }
    grad
}

/// Max relative error between an analytic gradient and the fd oracle.
pub fn max_rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a as f64, n))
        .fold(0.0, f64::max)
}

/// Random input in [-2, 2] for gradient trials.
pub fn random_input(rng: &mut Pcg32, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect()
}

/// Run `trials` checks of `loss_and_grad` (which returns the analytic gradient
/// for a fresh random input) against the fd oracle. Returns the worst error.
pub fn check_many(
    rng: &mut Pcg32,
    trials: usize,
    n: usize,
    mut loss: impl FnMut(&[f32]) -> f64,
    mut analytic: impl FnMut(&[f32]) -> Vec<f32>,
) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = random_input(rng, n);
        let a = analytic(&x);
        let g = numeric_grad(&x, FD_STEP, &mut loss);
        worst = worst.max(max_rel_err(&a, &g));
    }
    worst
}
