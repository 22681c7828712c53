//! Plain (non-recorded) dense linear algebra helpers.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Relative jitter added to kernel matrices before factorization.
pub const JITTER: f64 = 1e-6;
/// Jitter used for the single retry.
pub const JITTER_RETRY: f64 = 1e-4;

const SYMMETRY_TOL: f64 = 1e-10;

pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn check_symmetric(a: &Mat) -> Result<()> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "expected square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = max_abs(a).max(f64::MIN_POSITIVE);
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if worst > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(worst));
    }
    Ok(())
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
///
/// Only the lower triangle of `a` is read. A pivot that is not strictly
/// positive yields [`Error::NotPositiveDefinite`].
pub fn cholesky(a: &Mat) -> Result<Mat> {
    check_symmetric(a)?;
    let n = a.nrows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Jitter that would be added to `a` at the given relative level.
pub fn jitter_amount(a: &Mat, level: f64) -> f64 {
    let n = a.nrows().max(1);
    let mean_diag = a.diagonal().iter().sum::<f64>() / n as f64;
    level * mean_diag.abs().max(f64::MIN_POSITIVE)
}

/// Cholesky with the standard kernel-matrix jitter policy: `1e-6 * mean(diag)`
/// added first, retried once at `1e-4 * mean(diag)`.
///
/// Returns the factor and the absolute jitter that succeeded.
pub fn cholesky_jittered(a: &Mat) -> Result<(Mat, f64)> {
    let mut last = None;
    for level in [JITTER, JITTER_RETRY] {
        let eps = jitter_amount(a, level);
        let mut aj = a.clone();
        for i in 0..aj.nrows() {
            aj[(i, i)] += eps;
        }
        match cholesky(&aj) {
            Ok(l) => return Ok((l, eps)),
            Err(e @ Error::NotPositiveDefinite { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Solve `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Mat, b: &Mat) -> Mat {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solve `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_t(l: &Mat, b: &Mat) -> Mat {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..x.ncols() {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Lower triangle of `a`, optionally excluding the diagonal.
pub fn tril(a: &Mat, strict: bool) -> Mat {
    let mut out = a.clone();
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            if i < j || (strict && i == j) {
                out[(i, j)] = 0.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_factor() {
        let l = cholesky(&Mat::identity(2, 2)).unwrap();
        assert_eq!(l, Mat::identity(2, 2));
    }

    #[test]
    fn two_by_two_factor() {
        let a = Mat::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let l = cholesky(&a).unwrap();
        let expected = Mat::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2f64.sqrt()]);
        assert!((&l - &expected).abs().max() < 1e-15);
        assert!((&l * l.transpose() - &a).abs().max() <= 1e-8 * max_abs(&a));
    }

    #[test]
    fn indefinite_rejected() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            cholesky(&a),
            Err(Error::NotPositiveDefinite { index: 1, .. })
        ));
        // jitter is far too small to rescue an eigenvalue of -1
        assert!(matches!(
            cholesky_jittered(&a),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn asymmetric_rejected() {
        let a = Mat::from_row_slice(2, 2, &[4.0, 2.0, 1.0, 3.0]);
        assert!(matches!(cholesky(&a), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn jitter_rescues_singular_gram() {
        // two identical rows: rank one
        let a = Mat::from_element(2, 2, 1.0);
        let (l, eps) = cholesky_jittered(&a).unwrap();
        assert!(eps > 0.0);
        assert!(l[(1, 1)] > 0.0);
    }

    #[test]
    fn triangular_solves() {
        let a = Mat::from_row_slice(3, 3, &[4.0, 2.0, 0.4, 2.0, 3.0, 0.5, 0.4, 0.5, 2.0]);
        let l = cholesky(&a).unwrap();
        let b = Mat::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 0.0]);
        let x = solve_lower(&l, &b);
        assert!((&l * &x - &b).abs().max() < 1e-12);
        let y = solve_lower_t(&l, &b);
        assert!((l.transpose() * &y - &b).abs().max() < 1e-12);
    }
}
