//! Population quantities for a known design and the large-sample behavior of
//! the cluster-robust variance they imply.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::basis::{build_basis, Design};
use crate::error::{RdError, Result};
use crate::linalg::least_squares;

/// Discrete population restricted to the estimation window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationDesign {
    pub support: Vec<f64>,
    /// Probability of each support point conditional on the window.
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub design: Design,
    pub true_tau: f64,
}

impl PopulationDesign {
    pub fn new(
        support: Vec<f64>,
        pi: Vec<f64>,
        mu: Vec<f64>,
        sigma2: Vec<f64>,
        design: Design,
        true_tau: f64,
    ) -> Result<Self> {
        let g = support.len();
        if pi.len() != g || mu.len() != g || sigma2.len() != g {
            return Err(RdError::InvalidInput(
                "support, pi, mu and sigma2 must have the same length".into(),
            ));
        }
        if support.iter().chain(&mu).chain(&sigma2).any(|v| !v.is_finite()) {
            return Err(RdError::InvalidInput("population values must be finite".into()));
        }
        if pi.iter().any(|&p| !(p > 0.0)) {
            return Err(RdError::InvalidInput("probabilities must be positive".into()));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > 1e-8 {
            return Err(RdError::InvalidInput(format!(
                "probabilities must sum to one, got {total}"
            )));
        }
        if sigma2.iter().any(|&s| s < 0.0) {
            return Err(RdError::InvalidInput("variances must be nonnegative".into()));
        }
        if let Some(x) = support.iter().find(|x| x.abs() > design.bandwidth) {
            return Err(RdError::InvalidInput(format!(
                "support point {x} lies outside the window of half-width {}",
                design.bandwidth
            )));
        }
        let below = support.iter().filter(|&&x| x < 0.0).count();
        let above = g - below;
        let needed = design.order + 1;
        for (side, found) in [("below", below), ("above", above)] {
            if found < needed {
                return Err(RdError::InsufficientSupport {
                    side,
                    found,
                    needed,
                    order: design.order,
                });
            }
        }
        Ok(Self {
            support,
            pi,
            mu,
            sigma2,
            design,
            true_tau,
        })
    }

    /// Restricts a population on the full support to `[-h, h]` and
    /// renormalizes the probabilities.
    pub fn windowed(
        support: &[f64],
        pi: &[f64],
        mu: &[f64],
        sigma2: &[f64],
        design: Design,
        true_tau: f64,
    ) -> Result<Self> {
        let keep: Vec<usize> = (0..support.len())
            .filter(|&i| support[i].abs() <= design.bandwidth)
            .collect();
        if keep.is_empty() {
            return Err(RdError::EmptyWindow {
                bandwidth: design.bandwidth,
            });
        }
        let mass: f64 = keep.iter().map(|&i| pi[i]).sum();
        let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self::new(
            pick(support),
            keep.iter().map(|&i| pi[i] / mass).collect(),
            pick(mu),
            pick(sigma2),
            design,
            true_tau,
        )
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    fn basis(&self) -> Vec<DVector<f64>> {
        self.support
            .iter()
            .map(|&x| DVector::from_vec(build_basis(x, self.design.order)))
            .collect()
    }
}

/// Precomputed population projection.
struct Projection {
    basis: Vec<DVector<f64>>,
    q_inverse: DMatrix<f64>,
    theta: DVector<f64>,
    delta: Vec<f64>,
    /// `e1' Q^{-1} m_g`.
    lever: Vec<f64>,
}

impl Projection {
    fn new(pd: &PopulationDesign) -> Result<Self> {
        let basis = pd.basis();
        // weighted least squares on sqrt(pi) rows keeps the conditioning of
        // the design rather than squaring it through Q
        let k = pd.design.k();
        let roots: Vec<f64> = pd.pi.iter().map(|p| p.sqrt()).collect();
        let weighted = DMatrix::from_fn(pd.len(), k, |g, j| roots[g] * basis[g][j]);
        let target = DVector::from_fn(pd.len(), |g, _| roots[g] * pd.mu[g]);
        let ls = least_squares(&weighted, &target).map_err(|_| RdError::SingularPopulation)?;
        let q_inverse = ls.xtx_inverse;
        let theta = ls.coefficients;
        let delta = basis
            .iter()
            .zip(&pd.mu)
            .map(|(m, mu)| mu - m.dot(&theta))
            .collect();
        let e1 = q_inverse.row(0).transpose();
        let lever = basis.iter().map(|m| e1.dot(m)).collect();
        Ok(Self {
            basis,
            q_inverse,
            theta,
            delta,
            lever,
        })
    }

    fn omega(&self, pd: &PopulationDesign) -> Vec<f64> {
        self.lever
            .iter()
            .zip(&pd.pi)
            .map(|(l, p)| p * l * l)
            .collect()
    }

    /// `m_g' Q^{-1} m_j`.
    fn cross(&self, g: usize, j: usize) -> f64 {
        self.basis[g].dot(&(&self.q_inverse * &self.basis[j]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationFit {
    pub theta_h: Vec<f64>,
    pub tau_h: f64,
    pub delta: Vec<f64>,
}

pub fn population_fit(pd: &PopulationDesign) -> Result<PopulationFit> {
    let p = Projection::new(pd)?;
    Ok(PopulationFit {
        tau_h: p.theta[0],
        theta_h: p.theta.iter().copied().collect(),
        delta: p.delta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfluenceWeights {
    pub omega: Vec<f64>,
    pub sigma2_tau: f64,
}

pub fn influence_weights(pd: &PopulationDesign) -> Result<InfluenceWeights> {
    let p = Projection::new(pd)?;
    let omega = p.omega(pd);
    let sigma2_tau = omega.iter().zip(&pd.sigma2).map(|(w, s)| w * s).sum();
    Ok(InfluenceWeights { omega, sigma2_tau })
}

/// `sum_g pi_g m_g' Q^{-1} m_g`, which equals the number of regressors.
pub fn leverage_trace(pd: &PopulationDesign) -> Result<f64> {
    let p = Projection::new(pd)?;
    Ok((0..pd.len()).map(|g| pd.pi[g] * p.cross(g, g)).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedGExpectation {
    /// Limit of the mean of the cluster-robust `sigma2` with few support points.
    pub expectation: f64,
    pub sigma2_tau: f64,
    pub t1: f64,
    pub t2: f64,
    /// Set when the variances differ across support points, in which case
    /// `t1` and `t2` use the influence-weighted average variance.
    pub approximate: bool,
}

/// Expected limit of the cluster-robust variance when the number of support
/// points is fixed, at the scaled specification errors `sqrt(N_h) delta_g`.
pub fn fixed_g_expectation(pd: &PopulationDesign, n_h: usize) -> Result<FixedGExpectation> {
    let p = Projection::new(pd)?;
    let omega = p.omega(pd);
    let g = pd.len();
    let n = n_h as f64;
    let sigma2_tau: f64 = omega.iter().zip(&pd.sigma2).map(|(w, s)| w * s).sum();

    let mut misspec = 0.0;
    let mut noise = 0.0;
    let mut leverage = 0.0;
    for (a, w) in omega.iter().enumerate() {
        let d2 = n * p.delta[a] * p.delta[a];
        let weight = pd.pi[a] * w;
        misspec += d2 * weight;
        let own = p.cross(a, a);
        let spill: f64 = (0..g)
            .map(|j| pd.sigma2[j] * pd.pi[j] * p.cross(a, j).powi(2))
            .sum();
        noise += (spill - 2.0 * pd.sigma2[a] * own) * weight;
        leverage += own * weight;
    }
    let omega_total: f64 = omega.iter().sum();
    let first = pd.sigma2[0];
    let approximate = pd.sigma2.iter().any(|&s| (s - first).abs() > 1e-12 * first.abs().max(1e-300));
    Ok(FixedGExpectation {
        expectation: sigma2_tau + misspec + noise,
        sigma2_tau,
        t1: if sigma2_tau > 0.0 { misspec / sigma2_tau } else { f64::NAN },
        t2: -leverage / omega_total,
        approximate,
    })
}

/// Probability limit of the cluster-robust variance when the number of
/// support points grows, evaluated at sample size `n`.
pub fn large_g_value(pd: &PopulationDesign, n: usize) -> Result<f64> {
    let p = Projection::new(pd)?;
    let mut total = 0.0;
    for g in 0..pd.len() {
        let d2 = p.delta[g] * p.delta[g];
        let q_weight = pd.pi[g] * p.lever[g] * p.lever[g];
        total += q_weight * (pd.sigma2[g] + d2 + (n as f64 - 1.0) * pd.pi[g] * d2);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub support: Vec<f64>,
    pub pi: Vec<f64>,
    pub theta_h: Vec<f64>,
    pub tau_h: f64,
    pub true_tau: f64,
    pub delta: Vec<f64>,
    pub omega: Vec<f64>,
    pub sigma2_tau: f64,
    pub n_h: usize,
    pub d: Vec<f64>,
    /// `sqrt(N_h) (tau_h - tau)`.
    pub b: f64,
    pub t1: f64,
    pub t2: f64,
    pub approximate: bool,
    pub fixed_g_expectation: f64,
    pub large_g_value: f64,
    pub leverage_trace: f64,
}

pub fn decompose(pd: &PopulationDesign, n_h: usize) -> Result<DecompositionReport> {
    let fit = population_fit(pd)?;
    let weights = influence_weights(pd)?;
    let fixed = fixed_g_expectation(pd, n_h)?;
    let root_n = (n_h as f64).sqrt();
    Ok(DecompositionReport {
        support: pd.support.clone(),
        pi: pd.pi.clone(),
        d: fit.delta.iter().map(|d| root_n * d).collect(),
        b: root_n * (fit.tau_h - pd.true_tau),
        theta_h: fit.theta_h,
        tau_h: fit.tau_h,
        true_tau: pd.true_tau,
        delta: fit.delta,
        omega: weights.omega,
        sigma2_tau: weights.sigma2_tau,
        n_h,
        t1: fixed.t1,
        t2: fixed.t2,
        approximate: fixed.approximate,
        fixed_g_expectation: fixed.expectation,
        large_g_value: large_g_value(pd, n_h)?,
        leverage_trace: leverage_trace(pd)?,
    })
}
