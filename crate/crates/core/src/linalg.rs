//! Small dense linear-algebra helpers built on nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{RdError, Result};

/// Singular values below this fraction of the largest one count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Ordinary least squares solution together with `(M'M)^{-1}`.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub coefficients: DVector<f64>,
    pub residuals: DVector<f64>,
    pub xtx_inverse: DMatrix<f64>,
}

/// Solves `min |y - M b|` with a Householder QR on the column-scaled design.
///
/// Columns are divided by their largest absolute entry before factorizing so
/// that high powers of a wide running variable do not wreck the conditioning.
pub fn least_squares(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<LeastSquares> {
    let (n, k) = design.shape();
    if y.len() != n {
        return Err(RdError::Internal(format!(
            "design has {n} rows but response has {}",
            y.len()
        )));
    }
    if n < k {
        return Err(RdError::RankDeficient { ratio: 0.0 });
    }
    let scale: Vec<f64> = (0..k)
        .map(|j| design.column(j).amax())
        .collect();
    if scale.iter().any(|&s| s == 0.0 || !s.is_finite()) {
        return Err(RdError::RankDeficient { ratio: 0.0 });
    }
    let mut scaled = design.clone();
    for (j, &s) in scale.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / s);
    }

    let qr = scaled.qr();
    let r = qr.r();
    let sv = r.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if !(smax > 0.0) || smin < RANK_TOLERANCE * smax {
        return Err(RdError::RankDeficient {
            ratio: if smax > 0.0 { smin / smax } else { 0.0 },
        });
    }

    let mut qty = y.clone();
    qr.q_tr_mul(&mut qty);
    let qty = qty.rows(0, k).into_owned();
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or(RdError::RankDeficient { ratio: 0.0 })?;

    let mut coefficients = &r_inv * qty;
    for (j, &s) in scale.iter().enumerate() {
        coefficients[j] /= s;
    }
    let mut xtx_inverse = &r_inv * r_inv.transpose();
    for i in 0..k {
        for j in 0..k {
            xtx_inverse[(i, j)] /= scale[i] * scale[j];
        }
    }
    let residuals = y - design * &coefficients;

    Ok(LeastSquares {
        coefficients,
        residuals,
        xtx_inverse,
    })
}

/// Solves a small symmetric positive definite system, falling back to LU.
pub fn solve_spd(matrix: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = matrix.clone().cholesky() {
        return Some(chol.solve(rhs));
    }
    matrix.clone().lu().solve(rhs)
}

/// Inverse of a small symmetric matrix, rejecting numerically singular input.
pub fn symmetric_inverse(matrix: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(matrix.clone());
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if !(max > 0.0) || eig.eigenvalues.iter().any(|v| v.abs() < RANK_TOLERANCE * max) {
        return None;
    }
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
    let v = &eig.eigenvectors;
    let inv = v * DMatrix::from_diagonal(&inv_vals) * v.transpose();
    Some((&inv + inv.transpose()) * 0.5)
}
