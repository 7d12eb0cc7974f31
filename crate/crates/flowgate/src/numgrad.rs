//! Central finite-difference gradient probes.
//!
//! Every differentiable operation in this crate is validated against
//! numerical differentiation. The probe perturbs one input element at a
//! time, so it is independent of the tape's backward implementation by
//! construction.

/// Central difference `(f(x+eps) - f(x-eps)) / (2 eps)` for element `idx`
/// of a buffer that `f` reads. `f` receives the full perturbed buffer.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], idx: usize, eps: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[idx] = x[idx] + eps;
    let fp = f(&xp);
    xp[idx] = x[idx] - eps;
    let fm = f(&xp);
    (fp - fm) / (2.0 * eps)
}

/// Relative error with an absolute floor: `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps near-zero gradients from inflating the ratio; pick it
/// well below the magnitudes the test cares about.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
