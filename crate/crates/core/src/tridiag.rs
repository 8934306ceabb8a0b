//! Factorized tridiagonal systems (Thomas algorithm).

use crate::error::{Error, Result};

/// LU factors of a tridiagonal matrix, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    lower: Vec<f64>,
    // modified superdiagonal and inverse pivots
    upper_mod: Vec<f64>,
    inv_pivot: Vec<f64>,
}

impl Tridiagonal {
    /// `lower[i]` multiplies `u[i-1]` in row `i` (lower[0] unused),
    /// `upper[i]` multiplies `u[i+1]` (upper[n-1] unused).
    pub fn factor(lower: &[f64], diag: &[f64], upper: &[f64], step: usize) -> Result<Self> {
        let n = diag.len();
        let mut upper_mod = vec![0.0; n];
        let mut inv_pivot = vec![0.0; n];
        let mut prev_upper = 0.0;
        for i in 0..n {
            let pivot = diag[i] - if i > 0 { lower[i] * prev_upper } else { 0.0 };
            if !pivot.is_finite() || pivot.abs() < 1e-300 {
                return Err(Error::Numerical {
                    step,
                    reason: format!("zero pivot in tridiagonal solve at row {i}"),
                });
            }
            inv_pivot[i] = 1.0 / pivot;
            upper_mod[i] = if i + 1 < n { upper[i] * inv_pivot[i] } else { 0.0 };
            prev_upper = upper_mod[i];
        }
        Ok(Self { lower: lower.to_vec(), upper_mod, inv_pivot })
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        rhs[0] *= self.inv_pivot[0];
        for i in 1..n {
            rhs[i] = (rhs[i] - self.lower[i] * rhs[i - 1]) * self.inv_pivot[i];
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= self.upper_mod[i] * rhs[i + 1];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_against_dense_product() {
        let n = 7;
        let lower: Vec<f64> = (0..n).map(|i| -1.0 - 0.1 * i as f64).collect();
        let upper: Vec<f64> = (0..n).map(|i| -0.5 + 0.05 * i as f64).collect();
        let diag: Vec<f64> = (0..n).map(|i| 4.0 + i as f64).collect();
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut b = vec![0.0; n];
        for i in 0..n {
            b[i] = diag[i] * x[i];
            if i > 0 {
                b[i] += lower[i] * x[i - 1];
            }
            if i + 1 < n {
                b[i] += upper[i] * x[i + 1];
            }
        }
        let f = Tridiagonal::factor(&lower, &diag, &upper, 0).unwrap();
        f.solve_in_place(&mut b);
        for i in 0..n {
            assert!((b[i] - x[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn singular_matrix_reports_step() {
        let err = Tridiagonal::factor(&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0], 42).unwrap_err();
        assert!(matches!(err, Error::Numerical { step: 42, .. }));
    }
}
