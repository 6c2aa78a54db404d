//! Small dense linear-algebra helpers: Cholesky factorization and solves.
//!
//! Everything here operates on symmetric positive definite matrices of
//! modest size (detector Gram systems, log-det factorizations, filter
//! design solves), so a plain O(n^3) dense Cholesky is the right tool.

use ndarray::{Array1, Array2};

use crate::error::{Result, StricError};

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(StricError::data(format!(
            "cholesky: matrix must be square, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(StricError::numeric(format!(
                        "cholesky: non-positive pivot {s:e} at index {i}"
                    )));
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve L y = b for lower-triangular L.
pub fn solve_lower(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// Solve L^T x = y for lower-triangular L.
pub fn solve_lower_transpose(l: &Array2<f64>, y: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve A x = b with A symmetric positive definite, via Cholesky.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let l = cholesky(a)?;
    Ok(solve_lower_transpose(&l, &solve_lower(&l, b)))
}

/// Inverse of an SPD matrix from its Cholesky factor (column-by-column solve).
pub fn spd_inverse_from_factor(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::<f64>::zeros(n);
        e[j] = 1.0;
        let col = solve_lower_transpose(l, &solve_lower(l, &e));
        inv.column_mut(j).assign(&col);
    }
    inv
}

/// log det A for SPD A, from the Cholesky diagonal.
pub fn logdet_from_factor(l: &Array2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>()
}

/// Dot product with error-free transformations (FMA product errors plus
/// two-sum accumulation). Accurate to ~eps even under heavy cancellation,
/// which plain accumulation is not.
pub fn dot_compensated(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let p = x * y;
        let p_err = x.mul_add(y, -p);
        let s = sum + p;
        let bb = s - sum;
        let s_err = (sum - (s - bb)) + (p - bb);
        sum = s;
        comp += p_err + s_err;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cholesky_solve_roundtrip() {
        let a = array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let b = array![1.0, 2.0, 3.0];
        let x = solve_spd(&a, &b).unwrap();
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn logdet_matches_direct_2x2() {
        let a = array![[2.0, 0.3], [0.3, 1.5]];
        let l = cholesky(&a).unwrap();
        let det: f64 = 2.0 * 1.5 - 0.3 * 0.3;
        assert_abs_diff_eq!(logdet_from_factor(&l), det.ln(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(&a).is_err());
    }

    #[test]
    fn inverse_from_factor() {
        let a = array![[3.0, 1.0], [1.0, 2.0]];
        let l = cholesky(&a).unwrap();
        let inv = spd_inverse_from_factor(&l);
        let id = a.dot(&inv);
        assert_abs_diff_eq!(id[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(id[[0, 1]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(id[[1, 1]], 1.0, epsilon = 1e-12);
    }
}
