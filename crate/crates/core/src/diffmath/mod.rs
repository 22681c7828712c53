//! Differentiable numerical core: dense linear algebra, reverse-mode
//! gradients over a recorded tape, and the Adam optimizer.

pub mod adam;
pub mod linalg;
pub mod params;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use linalg::{cholesky, cholesky_jittered, Mat};
pub use params::ParamSet;
pub use tape::{Gradients, Tape, Var};

/// Central finite-difference gradient of `f` at `x`.
///
/// Independent of the tape; used to check recorded gradients.
pub fn finite_difference<F>(x: &Mat, step: f64, mut f: F) -> Mat
where
    F: FnMut(&Mat) -> f64,
{
    let mut g = Mat::zeros(x.nrows(), x.ncols());
    let mut xp = x.clone();
    for k in 0..x.len() {
        let orig = xp[k];
        xp[k] = orig + step;
        let fp = f(&xp);
        xp[k] = orig - step;
        let fm = f(&xp);
        xp[k] = orig;
        g[k] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Largest relative discrepancy between two gradient arrays, with a floor on
/// the denominator so entries that are both near zero compare absolutely.
pub fn max_rel_error(a: &Mat, b: &Mat, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
