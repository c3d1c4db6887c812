//! Standard errors for the jump estimate and Wald intervals built on them.
//!
//! All estimators return `sigma2` on the `sqrt(N_h)` scale, so that
//! `se = sqrt(sigma2 / N_h)`.

pub mod cluster;

use std::fmt;

use nalgebra::DVector;
use serde::Serialize;

use crate::basis::{build_basis, FitResult};
use crate::data::GroupedSample;
use crate::dist::{t_quantile, two_sided_z};
use crate::error::{RdError, Result};

pub use cluster::{Clusters, Regression};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VarianceMethod {
    Ehw,
    Crv,
    Crv2,
    Nn,
}

impl fmt::Display for VarianceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarianceMethod::Ehw => "EHW",
            VarianceMethod::Crv => "CRV",
            VarianceMethod::Crv2 => "CRV2",
            VarianceMethod::Nn => "NN",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceEstimate {
    pub method: VarianceMethod,
    pub sigma2: f64,
    pub se: f64,
    pub n_h: usize,
    pub dof: Option<f64>,
    pub stata_factor_applied: bool,
    pub warnings: Vec<String>,
}

impl VarianceEstimate {
    fn new(method: VarianceMethod, sigma2: f64, n_h: usize) -> Self {
        // rounding can leave a quadratic form a hair below zero
        let sigma2 = sigma2.max(0.0);
        Self {
            method,
            sigma2,
            se: (sigma2 / n_h as f64).sqrt(),
            n_h,
            dof: None,
            stata_factor_applied: false,
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub method: String,
    pub critical_value: f64,
    pub max_bias: Option<f64>,
}

impl ConfidenceInterval {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

pub(crate) fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(RdError::InvalidInput(format!(
            "confidence level must lie in (0, 1), got {level}"
        )))
    }
}

fn regression(fit: &FitResult) -> Regression<'_> {
    Regression {
        design: &fit.basis,
        residuals: &fit.residuals,
        xtx_inverse: &fit.xtx_inverse,
    }
}

/// Clusters of the fit rows, one per support point.
///
/// `grouped` must come from the same windowed sample as `fit`.
pub fn support_clusters(fit: &FitResult, grouped: &GroupedSample) -> Result<Clusters> {
    if grouped.total() != fit.n_h || grouped.members.len() != grouped.len() {
        return Err(RdError::InvalidInput(format!(
            "grouped sample has {} observations but the fit window has {}",
            grouped.total(),
            fit.n_h
        )));
    }
    for (x, rows) in grouped.support.iter().zip(&grouped.members) {
        if rows.iter().any(|&i| i >= fit.n_h || fit.x[i] != *x) {
            return Err(RdError::InvalidInput(
                "grouped sample does not match the fitted window".into(),
            ));
        }
    }
    Ok(Clusters::new(grouped.members.clone()))
}

pub fn ehw(fit: &FitResult) -> VarianceEstimate {
    let form = cluster::ehw_form(&regression(fit));
    VarianceEstimate::new(VarianceMethod::Ehw, fit.n_h as f64 * form, fit.n_h)
}

/// `G/(G-1) * (N-1)/(N-k)`.
pub fn stata_factor(clusters: usize, n: usize, k: usize) -> f64 {
    let g = clusters as f64;
    let n = n as f64;
    g / (g - 1.0) * (n - 1.0) / (n - k as f64)
}

pub fn crv(fit: &FitResult, grouped: &GroupedSample, apply_stata_factor: bool) -> Result<VarianceEstimate> {
    let clusters = support_clusters(fit, grouped)?;
    let mut sigma2 = fit.n_h as f64 * cluster::crv_form(&regression(fit), &clusters);
    if apply_stata_factor {
        sigma2 *= stata_factor(clusters.len(), fit.n_h, fit.k());
    }
    let mut est = VarianceEstimate::new(VarianceMethod::Crv, sigma2, fit.n_h);
    est.stata_factor_applied = apply_stata_factor;
    Ok(est)
}

pub fn crv2(fit: &FitResult, grouped: &GroupedSample) -> Result<VarianceEstimate> {
    let clusters = support_clusters(fit, grouped)?;
    let (form, truncated) = cluster::crv2_form(&regression(fit), &clusters)?;
    let mut est = VarianceEstimate::new(VarianceMethod::Crv2, fit.n_h as f64 * form, fit.n_h);
    if truncated {
        est.warnings.push(
            "a cluster saturates the fit; zero eigenvalues of its annihilator block were dropped"
                .into(),
        );
    }
    Ok(est)
}

pub fn bm_dof(fit: &FitResult, grouped: &GroupedSample) -> Result<f64> {
    let clusters = support_clusters(fit, grouped)?;
    let exact = fit.design.order + 1;
    if grouped.g_minus == exact && grouped.g_plus == exact {
        // each side's polynomial passes through its support means
        return Err(RdError::DegreesOfFreedom(format!(
            "both sides have exactly {exact} support points, so the fit absorbs every cluster"
        )));
    }
    cluster::bm_dof(&regression(fit), &clusters)
}

/// CRV2 variance carrying the Bell-McCaffrey degrees of freedom.
pub fn crv2_bm(fit: &FitResult, grouped: &GroupedSample) -> Result<VarianceEstimate> {
    let mut est = crv2(fit, grouped)?;
    est.dof = Some(bm_dof(fit, grouped)?);
    Ok(est)
}

/// `a' m(x_g)` for each support point, with `a = (M'M)^{-1} e1`.
pub(crate) fn support_weights(fit: &FitResult, grouped: &GroupedSample) -> Vec<f64> {
    let a: DVector<f64> = fit.xtx_inverse.column(0).into_owned();
    grouped
        .support
        .iter()
        .map(|&x| {
            build_basis(x, fit.design.order)
                .iter()
                .zip(a.iter())
                .map(|(m, a)| m * a)
                .sum()
        })
        .collect()
}

pub fn nn(fit: &FitResult, grouped: &GroupedSample) -> Result<VarianceEstimate> {
    support_clusters(fit, grouped)?;
    let weights = support_weights(fit, grouped);
    let form: f64 = grouped
        .counts
        .iter()
        .zip(&grouped.variances)
        .zip(&weights)
        .map(|((&n, &s2), &w)| n as f64 * s2 * w * w)
        .sum();
    let mut est = VarianceEstimate::new(VarianceMethod::Nn, fit.n_h as f64 * form, fit.n_h);
    let singletons = grouped.singletons();
    if !singletons.is_empty() {
        let list: Vec<String> = singletons.iter().map(|x| x.to_string()).collect();
        est.warnings.push(format!(
            "support points with a single observation contribute no variance: {}",
            list.join(", ")
        ));
    }
    Ok(est)
}

pub fn estimate(
    method: VarianceMethod,
    fit: &FitResult,
    grouped: &GroupedSample,
    apply_stata_factor: bool,
) -> Result<VarianceEstimate> {
    match method {
        VarianceMethod::Ehw => Ok(ehw(fit)),
        VarianceMethod::Crv => crv(fit, grouped, apply_stata_factor),
        VarianceMethod::Crv2 => crv2(fit, grouped),
        VarianceMethod::Nn => nn(fit, grouped),
    }
}

/// `tau -/+ c * se`, with `c` a normal quantile or a Student-t quantile
/// when the estimate carries degrees of freedom.
pub fn wald_ci(tau: f64, ve: &VarianceEstimate, level: f64) -> Result<ConfidenceInterval> {
    check_level(level)?;
    let critical_value = match ve.dof {
        Some(dof) => t_quantile(0.5 + level / 2.0, dof),
        None => two_sided_z(level),
    };
    let half = critical_value * ve.se;
    Ok(ConfidenceInterval {
        lower: tau - half,
        upper: tau + half,
        level,
        method: ve.method.to_string(),
        critical_value,
        max_bias: None,
    })
}
