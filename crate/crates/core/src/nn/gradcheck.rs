//! Central finite-difference verification of analytic gradients.
//!
//! The checker perturbs one input coordinate at a time and compares
//! `(f(x + h) - f(x - h)) / 2h` against the analytic gradient. It is
//! independent of the backward pass by construction: it only ever calls the
//! forward function.

/// Result of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare `analytic` against central differences of `f` at `x`.
///
/// The error metric is `|a - n| / max(1, |a|, |n|)`: relative for large
/// gradients, absolute (at the same threshold) for small ones.
pub fn check_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut probe = x.to_vec();
    let mut max_rel_err: f64 = 0.0;
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        max_rel_err = max_rel_err.max(rel);
    }
    GradCheckReport {
        max_rel_err,
        checked: x.len(),
    }
}

/// Default step size used across the gradient suite.
pub const FD_STEP: f64 = 1e-5;

/// Default acceptance threshold for [`check_gradient`].
pub const FD_TOLERANCE: f64 = 1e-4;
