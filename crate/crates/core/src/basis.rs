//! Interacted polynomial basis and the local polynomial fit.
//!
//! The basis for order `p` is
//! `(T, T x, .., T x^p, 1, x, .., x^p)` with `T = 1{x >= 0}`, so the first
//! coefficient is the jump at the cutoff.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{GroupedSample, Sample};
use crate::error::{RdError, Result};
use crate::linalg::least_squares;

/// Polynomial order and bandwidth of a uniform-kernel local fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Design {
    pub order: usize,
    /// Half-width of the closed window `[-h, h]`; may be `+inf`.
    pub bandwidth: f64,
}

impl Design {
    pub fn new(order: usize, bandwidth: f64) -> Result<Self> {
        if bandwidth.is_nan() || bandwidth <= 0.0 {
            return Err(RdError::InvalidInput(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Self { order, bandwidth })
    }

    /// Local linear fit over the whole sample.
    pub fn global_linear() -> Self {
        Self {
            order: 1,
            bandwidth: f64::INFINITY,
        }
    }

    /// Number of regressors, `2(p + 1)`.
    pub fn k(&self) -> usize {
        2 * (self.order + 1)
    }
}

/// Evaluates the basis vector `m(x)`.
pub fn build_basis(x: f64, order: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * (order + 1)];
    fill_basis(x, order, &mut out);
    out
}

pub(crate) fn fill_basis(x: f64, order: usize, out: &mut [f64]) {
    let treated = if x >= 0.0 { 1.0 } else { 0.0 };
    let mut power = 1.0;
    for j in 0..=order {
        out[j] = treated * power;
        out[order + 1 + j] = power;
        power *= x;
    }
}

/// Basis matrix with one row per `x`.
pub fn basis_matrix(xs: &[f64], order: usize) -> DMatrix<f64> {
    let k = 2 * (order + 1);
    let mut m = DMatrix::zeros(xs.len(), k);
    let mut row = vec![0.0; k];
    for (i, &x) in xs.iter().enumerate() {
        fill_basis(x, order, &mut row);
        for j in 0..k {
            m[(i, j)] = row[j];
        }
    }
    m
}

/// Output of the local polynomial regression on the windowed sample.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub design: Design,
    pub theta: DVector<f64>,
    pub tau: f64,
    /// `(1/N_h) sum M_i M_i'`.
    pub q_hat: DMatrix<f64>,
    pub q_hat_inverse: DMatrix<f64>,
    /// `(M'M)^{-1}`.
    pub xtx_inverse: DMatrix<f64>,
    pub residuals: DVector<f64>,
    /// `w(X_i) = (1/N_h) e1' Q^{-1} M_i`, so that `tau = sum w_i Y_i`.
    pub weights: DVector<f64>,
    pub n_h: usize,
    /// Basis matrix of the windowed rows.
    pub basis: DMatrix<f64>,
    /// Windowed running variable, in the order of the source sample.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl FitResult {
    /// Windowed sample the fit was computed on.
    pub fn sample(&self) -> Sample {
        Sample::from_xy(&self.x, &self.y).expect("fit retains a valid sample")
    }

    /// Groups the windowed rows by support point.
    pub fn grouped(&self) -> GroupedSample {
        self.sample().group()
    }

    pub fn k(&self) -> usize {
        self.design.k()
    }
}

fn check_support(sample: &Sample, order: usize) -> Result<()> {
    let support = sample.support();
    let below = support.iter().filter(|&&x| x < 0.0).count();
    let above = support.len() - below;
    let needed = order + 1;
    if below < needed {
        return Err(RdError::InsufficientSupport {
            side: "below",
            found: below,
            needed,
            order,
        });
    }
    if above < needed {
        return Err(RdError::InsufficientSupport {
            side: "above",
            found: above,
            needed,
            order,
        });
    }
    Ok(())
}

/// Windows the sample and runs the local polynomial OLS fit.
pub fn fit(sample: &Sample, design: &Design) -> Result<FitResult> {
    let windowed = sample.window(design.bandwidth)?;
    fit_windowed(&windowed, design)
}

/// Fits on a sample that is already restricted to the window.
pub(crate) fn fit_windowed(windowed: &Sample, design: &Design) -> Result<FitResult> {
    check_support(windowed, design.order)?;
    let x = windowed.xs();
    let y = windowed.ys();
    let n_h = x.len();
    let basis = basis_matrix(&x, design.order);
    let response = DVector::from_column_slice(&y);
    let ls = least_squares(&basis, &response)?;

    let nf = n_h as f64;
    let q_hat = basis.transpose() * &basis / nf;
    let q_hat_inverse = &ls.xtx_inverse * nf;
    // w_i = e1' (M'M)^{-1} M_i
    let e1_row = ls.xtx_inverse.row(0).transpose();
    let weights = &basis * e1_row;

    Ok(FitResult {
        design: *design,
        tau: ls.coefficients[0],
        theta: ls.coefficients,
        q_hat,
        q_hat_inverse,
        xtx_inverse: ls.xtx_inverse,
        residuals: ls.residuals,
        weights,
        n_h,
        basis,
        x,
        y,
    })
}

/// Fitted polynomial `m(x)' theta` at an arbitrary point.
pub fn fitted_cef(fit: &FitResult, x: f64) -> f64 {
    build_basis(x, fit.design.order)
        .iter()
        .zip(fit.theta.iter())
        .map(|(m, t)| m * t)
        .sum()
}
