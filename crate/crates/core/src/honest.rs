//! Honest confidence intervals under a bound on the second derivative (BSD)
//! or on the misspecification error at the cutoff (BME).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::basis::{build_basis, fit_windowed, Design, FitResult};
use crate::data::{GroupedSample, Sample};
use crate::dist::{normal_cdf, normal_sf, two_sided_z};
use crate::error::{RdError, Result};
use crate::variance::{self, check_level, ConfidenceInterval, VarianceEstimate};

const CV_TOLERANCE: f64 = 1e-10;

/// `P(|Z + r| <= c)` for standard normal `Z`.
fn folded_normal_cdf(c: f64, r: f64) -> f64 {
    // 1 - P(Z > c - r) - P(Z < -c - r), accurate when both tails are small
    1.0 - normal_sf(c - r) - normal_cdf(-c - r)
}

/// The `level` quantile of `|N(r, 1)|`.
pub fn cv_halfnormal(r: f64, level: f64) -> Result<f64> {
    check_level(level)?;
    if !r.is_finite() {
        return Err(RdError::InvalidInput(format!("noncentrality must be finite, got {r}")));
    }
    let r = r.abs();
    let f = |c: f64| folded_normal_cdf(c, r) - level;
    let mut lo = 0.0_f64;
    let mut hi = r + two_sided_z(level) + 1.0;
    while f(hi) < 0.0 {
        hi *= 2.0;
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let v = f(mid);
        if v.abs() <= CV_TOLERANCE && hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(mid)
}

/// Rule of thumb `K = 8 S / len^2`, where `S` bounds the departure of the
/// regression function from a straight line over an interval of length `len`.
pub fn k_heuristic(s: f64, interval_length: f64) -> Result<f64> {
    if !(s > 0.0) || !(interval_length > 0.0) {
        return Err(RdError::InvalidInput(format!(
            "K heuristic needs positive inputs, got S = {s}, length = {interval_length}"
        )));
    }
    Ok(8.0 * s / (interval_length * interval_length))
}

/// `sum_i w_i X_i^2 sign(X_i)`; nonpositive for a local linear fit.
fn curvature_moment(fit: &FitResult) -> f64 {
    fit.x
        .iter()
        .zip(fit.weights.iter())
        .map(|(&x, &w)| {
            let s = if x >= 0.0 { 1.0 } else { -1.0 };
            w * x * x * s
        })
        .sum()
}

/// Worst-case bias in units of the standard error.
pub fn bsd_rsup(fit: &FitResult, k: f64, sigma_nn: f64) -> Result<f64> {
    if fit.design.order != 1 {
        return Err(RdError::InvalidInput(format!(
            "BSD requires p=1, got p={}",
            fit.design.order
        )));
    }
    if !(k >= 0.0) || !k.is_finite() {
        return Err(RdError::InvalidInput(format!("K must be finite and nonnegative, got {k}")));
    }
    if !(sigma_nn > 0.0) {
        return Err(RdError::DegenerateVariance(
            "standard error for the honest interval is zero".into(),
        ));
    }
    let se = sigma_nn / (fit.n_h as f64).sqrt();
    let moment = curvature_moment(fit);
    let r = -0.5 * k * moment / se;
    let scale: f64 = fit
        .x
        .iter()
        .zip(fit.weights.iter())
        .map(|(&x, &w)| (w * x * x).abs())
        .sum::<f64>()
        * 0.5
        * k
        / se;
    if r < -1e-10 * scale.max(1.0) {
        return Err(RdError::Internal(format!(
            "worst-case bias has the wrong sign: r_sup = {r}"
        )));
    }
    Ok(r.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BsdVariance {
    Nn,
    Ehw,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BandwidthChoice {
    Fixed(f64),
    Optimize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BsdInput {
    pub k: f64,
    pub level: f64,
    pub bandwidth: BandwidthChoice,
    /// Bandwidths tried under [`BandwidthChoice::Optimize`].
    pub candidate_h: Option<Vec<f64>>,
    pub variance: BsdVariance,
}

impl BsdInput {
    pub fn fixed(k: f64, level: f64, h: f64) -> Self {
        Self {
            k,
            level,
            bandwidth: BandwidthChoice::Fixed(h),
            candidate_h: None,
            variance: BsdVariance::Nn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BmeWitness {
    pub g_minus_index: usize,
    pub g_plus_index: usize,
    pub s_minus: i8,
    pub s_plus: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HonestResult {
    pub ci: ConfidenceInterval,
    pub tau: f64,
    pub se_used: f64,
    pub max_bias: f64,
    pub n_h: usize,
    pub chosen_h: Option<f64>,
    /// Witnesses attaining the lower and the upper endpoint.
    pub witnesses: Option<(BmeWitness, BmeWitness)>,
    pub warnings: Vec<String>,
}

fn bsd_variance(fit: &FitResult, grouped: &GroupedSample, which: BsdVariance) -> Result<VarianceEstimate> {
    match which {
        BsdVariance::Nn => variance::nn(fit, grouped),
        BsdVariance::Ehw => Ok(variance::ehw(fit)),
    }
}

/// BSD interval on an existing local linear fit.
pub fn bsd_from_fit(
    fit: &FitResult,
    grouped: &GroupedSample,
    k: f64,
    level: f64,
    which: BsdVariance,
) -> Result<HonestResult> {
    check_level(level)?;
    let ve = bsd_variance(fit, grouped, which)?;
    let r = bsd_rsup(fit, k, ve.sigma2.sqrt())?;
    let cv = cv_halfnormal(r, level)?;
    let max_bias = 0.5 * k * curvature_moment(fit).abs();
    Ok(HonestResult {
        ci: ConfidenceInterval {
            lower: fit.tau - cv * ve.se,
            upper: fit.tau + cv * ve.se,
            level,
            method: "BSD".into(),
            critical_value: cv,
            max_bias: Some(max_bias),
        },
        tau: fit.tau,
        se_used: ve.se,
        max_bias,
        n_h: fit.n_h,
        chosen_h: Some(fit.design.bandwidth),
        witnesses: None,
        warnings: ve.warnings,
    })
}

fn bsd_at(sample: &Sample, h: f64, input: &BsdInput) -> Result<HonestResult> {
    let design = Design::new(1, h)?;
    let windowed = sample.window(h)?;
    let fit = fit_windowed(&windowed, &design)?;
    let grouped = fit.grouped();
    bsd_from_fit(&fit, &grouped, input.k, input.level, input.variance)
}

/// Distinct `|x_g|` that leave at least two support points on each side.
pub fn default_bsd_candidates(sample: &Sample) -> Vec<f64> {
    let support = sample.support();
    let mut below: Vec<f64> = support.iter().filter(|&&x| x < 0.0).map(|x| -x).collect();
    let mut above: Vec<f64> = support.iter().filter(|&&x| x >= 0.0).copied().collect();
    below.sort_by(f64::total_cmp);
    above.sort_by(f64::total_cmp);
    if below.len() < 2 || above.len() < 2 {
        return Vec::new();
    }
    let smallest = below[1].max(above[1]);
    let mut out: Vec<f64> = below
        .iter()
        .chain(&above)
        .copied()
        .filter(|&h| h >= smallest && h > 0.0)
        .collect();
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

pub fn bsd_ci(sample: &Sample, input: &BsdInput) -> Result<HonestResult> {
    if !(input.k >= 0.0) {
        return Err(RdError::InvalidInput(format!("K must be nonnegative, got {}", input.k)));
    }
    check_level(input.level)?;
    match &input.bandwidth {
        BandwidthChoice::Fixed(h) => bsd_at(sample, *h, input),
        BandwidthChoice::Optimize => {
            let mut candidates = input
                .candidate_h
                .clone()
                .unwrap_or_else(|| default_bsd_candidates(sample));
            candidates.sort_by(f64::total_cmp);
            let mut best: Option<HonestResult> = None;
            let mut reasons = Vec::new();
            for h in candidates {
                match bsd_at(sample, h, input) {
                    Ok(res) => {
                        let better = best
                            .as_ref()
                            .is_none_or(|b| res.ci.width() < b.ci.width());
                        if better {
                            best = Some(res);
                        }
                    }
                    Err(e) => reasons.push(format!("h = {h}: {e}")),
                }
            }
            best.ok_or_else(|| {
                RdError::NoFeasibleBandwidth(if reasons.is_empty() {
                    "no candidate bandwidth leaves two support points on each side".into()
                } else {
                    reasons.join("; ")
                })
            })
        }
    }
}

/// Plug-in covariance of `sqrt(N_h)` times the misspecification estimates at
/// each support point and the jump estimate, with the jump last.
pub fn bme_sigma_matrix(fit: &FitResult, grouped: &GroupedSample) -> Result<DMatrix<f64>> {
    variance::support_clusters(fit, grouped)?;
    let g = grouped.len();
    if grouped.counts.contains(&0) {
        return Err(RdError::Internal("empty support point in window".into()));
    }
    let n = fit.n_h as f64;
    let k = fit.k();
    let qinv = &fit.q_hat_inverse;

    let mut omega = DMatrix::zeros(k, k);
    for i in 0..fit.n_h {
        let m = fit.basis.row(i);
        omega += m.transpose() * m * fit.residuals[i].powi(2);
    }
    omega /= n;
    let sandwich = qinv * &omega * qinv;

    let basis: Vec<DVector<f64>> = grouped
        .support
        .iter()
        .map(|&x| DVector::from_vec(build_basis(x, fit.design.order)))
        .collect();
    let qm: Vec<DVector<f64>> = basis.iter().map(|m| qinv * m).collect();
    let sm: Vec<DVector<f64>> = basis.iter().map(|m| &sandwich * m).collect();
    let s2 = &grouped.variances;

    let mut sigma = DMatrix::zeros(g + 1, g + 1);
    for a in 0..g {
        for b in a..g {
            let mut v = basis[a].dot(&sm[b]) - (s2[a] + s2[b]) * basis[a].dot(&qm[b]);
            if a == b {
                v += s2[a] * n / grouped.counts[a] as f64;
            }
            sigma[(a, b)] = v;
            sigma[(b, a)] = v;
        }
        let cross = s2[a] * qm[a][0] - sm[a][0];
        sigma[(a, g)] = cross;
        sigma[(g, a)] = cross;
    }
    sigma[(g, g)] = sandwich[(0, 0)];
    Ok(sigma)
}

/// `ybar_g - m(x_g)' theta` for each support point.
pub fn misspecification(fit: &FitResult, grouped: &GroupedSample) -> Vec<f64> {
    grouped
        .support
        .iter()
        .zip(&grouped.means)
        .map(|(&x, &mean)| mean - crate::basis::fitted_cef(fit, x))
        .collect()
}

/// BME interval on an existing fit.
pub fn bme_from_fit(fit: &FitResult, grouped: &GroupedSample, level: f64) -> Result<HonestResult> {
    check_level(level)?;
    if grouped.g_minus == 0 || grouped.g_plus == 0 {
        return Err(RdError::InvalidInput(
            "need support points on both sides of the cutoff".into(),
        ));
    }
    let sigma = bme_sigma_matrix(fit, grouped)?;
    let delta = misspecification(fit, grouped);
    let z = two_sided_z(level);
    let n = fit.n_h as f64;
    let last = grouped.len();

    let mut lower = (f64::INFINITY, 0.0, None);
    let mut upper = (f64::NEG_INFINITY, 0.0, None);
    for gm in 0..grouped.g_minus {
        for gp in grouped.g_minus..last {
            for s_minus in [-1i8, 1] {
                for s_plus in [-1i8, 1] {
                    let (sm, sp) = (s_minus as f64, s_plus as f64);
                    let var = sigma[(gm, gm)]
                        + sigma[(gp, gp)]
                        + sigma[(last, last)]
                        + 2.0 * sm * sp * sigma[(gm, gp)]
                        + 2.0 * sm * sigma[(gm, last)]
                        + 2.0 * sp * sigma[(gp, last)];
                    let se = (var.max(0.0) / n).sqrt();
                    let bias = sp * delta[gp] + sm * delta[gm];
                    let w = BmeWitness {
                        g_minus_index: gm,
                        g_plus_index: gp,
                        s_minus,
                        s_plus,
                    };
                    let cl = fit.tau + bias - z * se;
                    let cr = fit.tau + bias + z * se;
                    if cl < lower.0 {
                        lower = (cl, bias, Some(w));
                    }
                    if cr > upper.0 {
                        upper = (cr, bias, Some(w));
                    }
                }
            }
        }
    }
    let (lo_w, hi_w) = match (lower.2, upper.2) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(RdError::Internal("no BME witness evaluated".into())),
    };
    let max_bias = lower.1.abs().max(upper.1.abs());
    let se_ehw = (sigma[(last, last)].max(0.0) / n).sqrt();
    Ok(HonestResult {
        ci: ConfidenceInterval {
            lower: lower.0,
            upper: upper.0,
            level,
            method: "BME".into(),
            critical_value: z,
            max_bias: Some(max_bias),
        },
        tau: fit.tau,
        se_used: se_ehw,
        max_bias,
        n_h: fit.n_h,
        chosen_h: None,
        witnesses: Some((lo_w, hi_w)),
        warnings: Vec::new(),
    })
}

pub fn bme_ci(sample: &Sample, design: &Design, level: f64) -> Result<HonestResult> {
    let windowed = sample.window(design.bandwidth)?;
    let fit = fit_windowed(&windowed, design)?;
    let grouped = fit.grouped();
    bme_from_fit(&fit, &grouped, level)
}
