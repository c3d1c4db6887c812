//! Property checks on randomized inputs. Each check returns a proptest
//! result so it can run under `proptest!` or a manual `TestRunner`.

#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rdinfer_core::asymptotics::{decompose, population_fit, PopulationDesign};
use rdinfer_core::basis::build_basis;
use rdinfer_core::dist::two_sided_z;
use rdinfer_core::honest::{
    bme_from_fit, bme_sigma_matrix, bsd_from_fit, bsd_rsup, cv_halfnormal, misspecification, BsdVariance,
};
use rdinfer_core::smoothness::{k_lower_bound_with, SmoothnessConfig};
use rdinfer_core::variance::{self, VarianceMethod};
use rdinfer_core::{fit, Design, FitResult, GroupedSample, Sample};

#[derive(Debug, Clone)]
pub struct Case {
    pub p: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Case {
    pub fn sample(&self) -> Sample {
        Sample::from_xy(&self.x, &self.y).unwrap()
    }

    pub fn fit(&self) -> (FitResult, GroupedSample) {
        let f = fit(&self.sample(), &Design::new(self.p, f64::INFINITY).unwrap()).unwrap();
        let g = f.grouped();
        (f, g)
    }

    fn with_y(&self, y: Vec<f64>) -> Case {
        Case { y, ..self.clone() }
    }
}

fn support(per_side: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    let grid: Vec<u32> = (1..=20).collect();
    let below = proptest::sample::subsequence(grid.clone(), per_side.clone());
    let above = proptest::sample::subsequence((0..=20).collect::<Vec<u32>>(), per_side);
    (below, above).prop_map(|(b, a)| {
        let mut s: Vec<f64> = b.iter().rev().map(|&k| -(k as f64) / 10.0).collect();
        s.extend(a.iter().map(|&k| k as f64 / 10.0));
        s
    })
}

fn expand(support: &[f64], counts: &[usize]) -> Vec<f64> {
    support
        .iter()
        .zip(counts)
        .flat_map(|(&s, &c)| std::iter::repeat_n(s, c))
        .collect()
}

/// Random design with `1..=max_count` rows per support point.
pub fn case_with(max_count: usize) -> impl Strategy<Value = Case> {
    (0usize..=2)
        .prop_flat_map(|p| (Just(p), support(p + 1..=6)))
        .prop_flat_map(move |(p, s)| {
            let g = s.len();
            (Just(p), Just(s), proptest::collection::vec(1..=max_count, g))
        })
        .prop_flat_map(|(p, s, counts)| {
            let x = expand(&s, &counts);
            let n = x.len();
            (Just(p), Just(x), proptest::collection::vec(-5.0..5.0f64, n))
        })
        .prop_map(|(p, x, y)| Case { p, x, y })
}

pub fn case() -> impl Strategy<Value = Case> {
    case_with(3)
}

/// Every support point observed once.
pub fn singleton_case() -> impl Strategy<Value = Case> {
    case_with(1)
}

/// Enough support on each side for blocks of two points, with repeated rows.
pub fn smoothness_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    support(6..=9)
        .prop_flat_map(|s| {
            let g = s.len();
            (Just(s), proptest::collection::vec(2usize..=3, g))
        })
        .prop_flat_map(|(s, counts)| {
            let x = expand(&s, &counts);
            let n = x.len();
            (Just(x), proptest::collection::vec(-2.0..2.0f64, n))
        })
}

pub fn population_case() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
    (0usize..=2)
        .prop_flat_map(|p| (Just(p), support(p + 1..=7)))
        .prop_flat_map(|(p, s)| {
            let g = s.len();
            (
                Just(p),
                Just(s),
                proptest::collection::vec(0.1..1.0f64, g),
                proptest::collection::vec(-3.0..3.0f64, g),
                0.05..2.0f64,
            )
        })
}

fn close(a: f64, b: f64, scale: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * scale.abs().max(a.abs()).max(b.abs()).max(f64::MIN_POSITIVE)
}

macro_rules! ensure_close {
    ($a:expr, $b:expr, $scale:expr, $tol:expr, $($msg:tt)+) => {{
        let (a, b) = ($a, $b);
        prop_assert!(close(a, b, $scale, $tol), "{}: {} vs {}", format!($($msg)+), a, b);
    }};
}

type Check = Result<(), TestCaseError>;

/// Endpoint slack for BME comparisons. A witness variance near zero turns an
/// absolute error e in the plug-in covariance into z * sqrt(e / N_h) in the
/// endpoint, so the bound is relative in the covariance, not the endpoint.
fn bme_slack(f: &FitResult, g: &GroupedSample, level: f64, yscale: f64) -> f64 {
    let sigma = bme_sigma_matrix(f, g).unwrap();
    let entries = sigma.amax() + variance_scale(f, yscale);
    1e-9 * yscale + two_sided_z(level) * (1e-11 * entries / f.n_h as f64).sqrt()
}

/// Size of a variance for outcomes of magnitude `yscale`; saturated designs
/// give zero residuals, so relative error alone is not meaningful.
fn variance_scale(f: &FitResult, yscale: f64) -> f64 {
    f.n_h as f64 * f.weights.iter().map(|w| w * w).sum::<f64>() * yscale * yscale
}

fn all_sigma2(f: &FitResult, g: &GroupedSample) -> Vec<(VarianceMethod, f64)> {
    [VarianceMethod::Ehw, VarianceMethod::Crv, VarianceMethod::Crv2, VarianceMethod::Nn]
        .into_iter()
        .map(|m| (m, variance::estimate(m, f, g, false).unwrap().sigma2))
        .collect()
}

/// Grouping keeps every row; within-group variances match their definition.
pub fn check_grouping(c: &Case) -> Check {
    let s = c.sample();
    let g = s.group();
    prop_assert_eq!(g.total(), s.n());
    let mut original: Vec<(f64, f64)> = c.x.iter().copied().zip(c.y.iter().copied()).collect();
    let mut regrouped: Vec<(f64, f64)> = Vec::new();
    for (gi, rows) in g.members.iter().enumerate() {
        for &i in rows {
            let o = s.observations()[i];
            prop_assert_eq!(o.x, g.support[gi]);
            regrouped.push((o.x, o.y));
        }
        if rows.len() >= 2 {
            let ss: f64 = rows.iter().map(|&i| (s.observations()[i].y - g.means[gi]).powi(2)).sum();
            ensure_close!((rows.len() - 1) as f64 * g.variances[gi], ss, 0.0, 1e-12, "variance identity");
        }
    }
    let key = |a: &(f64, f64), b: &(f64, f64)| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1));
    original.sort_by(key);
    regrouped.sort_by(key);
    prop_assert_eq!(original, regrouped);
    for h in [0.35, 1.0, f64::INFINITY] {
        if let Ok(w) = s.window(h) {
            prop_assert_eq!(w.window(h).unwrap(), w);
        }
    }
    Ok(())
}

/// Weight moments, normal equations and `tau = sum w y`.
pub fn check_weight_moments(c: &Case) -> Check {
    let (f, _) = c.fit();
    let scale: f64 = f.weights.iter().map(|w| w.abs()).sum::<f64>().max(1.0);
    for j in 0..=c.p {
        for treated in [true, false] {
            let m: f64 = f
                .x
                .iter()
                .zip(f.weights.iter())
                .filter(|(&x, _)| (x >= 0.0) == treated)
                .map(|(&x, &w)| w * x.powi(j as i32))
                .sum();
            let want = match (j, treated) {
                (0, true) => 1.0,
                (0, false) => -1.0,
                _ => 0.0,
            };
            prop_assert!((m - want).abs() <= 1e-8 * scale, "moment j={} treated={}: {}", j, treated, m);
        }
    }
    let tau: f64 = f.weights.iter().zip(&f.y).map(|(w, y)| w * y).sum();
    let yscale: f64 = f.y.iter().map(|y| y.abs()).fold(1.0, f64::max);
    ensure_close!(tau, f.tau, yscale * scale, 1e-10, "tau = sum w y");
    let normal = f.basis.transpose() * &f.residuals;
    let mscale = f.basis.iter().fold(1.0_f64, |m, v| m.max(v.abs())) * yscale * f.n_h as f64;
    prop_assert!(normal.amax() <= 1e-8 * mscale, "normal equations: {}", normal.amax());
    Ok(())
}

/// Row order does not change the estimate, any variance or the honest CIs.
pub fn check_order_invariance(c: &Case, rotate: usize) -> Check {
    let n = c.x.len();
    let perm: Vec<usize> = (0..n).rev().map(|i| (i + rotate) % n).collect();
    let other = Case {
        p: c.p,
        x: perm.iter().map(|&i| c.x[i]).collect(),
        y: perm.iter().map(|&i| c.y[i]).collect(),
    };
    let (f1, g1) = c.fit();
    let (f2, g2) = other.fit();
    let yscale = c.y.iter().fold(1.0_f64, |m, y| m.max(y.abs()));
    ensure_close!(f1.tau, f2.tau, yscale, 1e-10, "tau");
    for ((m, a), (_, b)) in all_sigma2(&f1, &g1).into_iter().zip(all_sigma2(&f2, &g2)) {
        ensure_close!(a, b, variance_scale(&f1, yscale), 1e-9, "{m} under reordering");
    }
    if let (Ok(a), Ok(b)) = (variance::bm_dof(&f1, &g1), variance::bm_dof(&f2, &g2)) {
        ensure_close!(a, b, 0.0, 1e-8, "BM dof under reordering");
    }
    let bme1 = bme_from_fit(&f1, &g1, 0.95).unwrap().ci;
    let bme2 = bme_from_fit(&f2, &g2, 0.95).unwrap().ci;
    let slack = bme_slack(&f1, &g1, 0.95, yscale);
    prop_assert!((bme1.lower - bme2.lower).abs() <= slack, "BME lower: {} vs {}", bme1.lower, bme2.lower);
    prop_assert!((bme1.upper - bme2.upper).abs() <= slack, "BME upper: {} vs {}", bme1.upper, bme2.upper);
    if c.p == 1 {
        if let (Ok(a), Ok(b)) = (
            bsd_from_fit(&f1, &g1, 0.5, 0.95, BsdVariance::Ehw),
            bsd_from_fit(&f2, &g2, 0.5, 0.95, BsdVariance::Ehw),
        ) {
            ensure_close!(a.ci.lower, b.ci.lower, yscale, 1e-9, "BSD lower");
            ensure_close!(a.ci.upper, b.ci.upper, yscale, 1e-9, "BSD upper");
        }
    }
    Ok(())
}

/// Shifting y changes no estimate, variance or CI; scaling y scales tau by c
/// and every sigma2 by c^2.
pub fn check_shift_and_scale(c: &Case, shift: f64, factor: f64) -> Check {
    let (f, g) = c.fit();
    let shifted = c.with_y(c.y.iter().map(|y| y + shift).collect());
    let scaled = c.with_y(c.y.iter().map(|y| y * factor).collect());
    let (fs, gs) = shifted.fit();
    let (fc, gc) = scaled.fit();
    let yscale = c.y.iter().fold(1.0_f64, |m, y| m.max(y.abs())) + shift.abs();
    ensure_close!(fs.tau, f.tau, yscale, 1e-9, "tau under shift");
    ensure_close!(fc.tau, factor * f.tau, factor.abs() * yscale, 1e-9, "tau under scale");
    for i in 0..f.residuals.len() {
        ensure_close!(fc.residuals[i], factor * f.residuals[i], factor.abs() * yscale, 1e-9, "residual {i}");
    }
    let base = all_sigma2(&f, &g);
    let vscale = variance_scale(&f, yscale);
    for ((m, a), (_, b)) in base.iter().zip(all_sigma2(&fs, &gs)) {
        ensure_close!(*a, b, vscale, 1e-9, "{m} under shift");
    }
    for ((m, a), (_, b)) in base.iter().zip(all_sigma2(&fc, &gc)) {
        ensure_close!(factor * factor * a, b, factor * factor * vscale, 1e-9, "{m} under scale");
    }
    let bme = bme_from_fit(&f, &g, 0.9).unwrap().ci;
    let bme_s = bme_from_fit(&fs, &gs, 0.9).unwrap().ci;
    let slack = bme_slack(&f, &g, 0.9, yscale + shift.abs());
    prop_assert!((bme.lower - bme_s.lower).abs() <= slack, "BME lower under shift: {} vs {}", bme.lower, bme_s.lower);
    prop_assert!((bme.upper - bme_s.upper).abs() <= slack, "BME upper under shift: {} vs {}", bme.upper, bme_s.upper);
    Ok(())
}

/// With one row per support point, CRV without the factor equals EHW.
pub fn check_singleton_crv(c: &Case) -> Check {
    let (f, g) = c.fit();
    let ehw = variance::ehw(&f).sigma2;
    let crv = variance::crv(&f, &g, false).unwrap().sigma2;
    ensure_close!(crv, ehw, 0.0, 1e-12, "singleton CRV vs EHW");
    Ok(())
}

/// Degrees of freedom depend on the design only.
pub fn check_bm_design_only(c: &Case, other_y: &[f64]) -> Check {
    let (f, g) = c.fit();
    let (f2, g2) = c.with_y(other_y.to_vec()).fit();
    match (variance::bm_dof(&f, &g), variance::bm_dof(&f2, &g2)) {
        (Ok(a), Ok(b)) => ensure_close!(a, b, 0.0, 1e-9, "BM dof across outcomes"),
        (Err(_), Err(_)) => {}
        (a, b) => prop_assert!(false, "BM dof defined for one outcome only: {:?} vs {:?}", a, b),
    }
    Ok(())
}

/// Half-normal critical values rise with r and stay between z and r + z.
pub fn check_cv(r1: f64, r2: f64, level: f64) -> Check {
    let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
    let z = two_sided_z(level);
    let c_lo = cv_halfnormal(lo, level).unwrap();
    let c_hi = cv_halfnormal(hi, level).unwrap();
    for (r, c) in [(lo, c_lo), (hi, c_hi)] {
        prop_assert!(c >= z - 1e-9 && c <= r + z + 1e-9, "cv({}) = {} outside [{}, {}]", r, c, z, r + z);
    }
    if hi - lo > 1e-6 {
        prop_assert!(c_hi > c_lo, "cv not increasing: cv({})={} cv({})={}", lo, c_lo, hi, c_hi);
    }
    Ok(())
}

/// The BSD interval is centered at tau with half-width cv(r_sup) se.
pub fn check_bsd_width(c: &Case, k: f64) -> Check {
    if c.p != 1 {
        return Ok(());
    }
    let (f, g) = c.fit();
    let Ok(res) = bsd_from_fit(&f, &g, k, 0.95, BsdVariance::Nn) else {
        // zero NN variance
        return Ok(());
    };
    let sigma = variance::nn(&f, &g).unwrap().sigma2.sqrt();
    let cv = cv_halfnormal(bsd_rsup(&f, k, sigma).unwrap(), 0.95).unwrap();
    let se = sigma / (f.n_h as f64).sqrt();
    ensure_close!(res.ci.width(), 2.0 * cv * se, 0.0, 1e-12, "BSD width");
    ensure_close!(0.5 * (res.ci.lower + res.ci.upper), f.tau, res.ci.width(), 1e-12, "BSD midpoint");
    Ok(())
}

/// The BME interval covers every witness interval, and the pair of
/// sign-flipped witnesses pins it on both sides of tau.
pub fn check_bme_union(c: &Case) -> Check {
    let (f, g) = c.fit();
    let ci = bme_from_fit(&f, &g, 0.95).unwrap().ci;
    let sigma = bme_sigma_matrix(&f, &g).unwrap();
    let delta = misspecification(&f, &g);
    let z = two_sided_z(0.95);
    let n = f.n_h as f64;
    let last = g.len();
    let slack = 1e-9 * (1.0 + ci.width() + f.tau.abs());
    for gm in 0..g.g_minus {
        for gp in g.g_minus..last {
            let witness = |sm: f64, sp: f64| {
                let var = sigma[(gm, gm)] + sigma[(gp, gp)] + sigma[(last, last)]
                    + 2.0 * sm * sp * sigma[(gm, gp)]
                    + 2.0 * sm * sigma[(gm, last)]
                    + 2.0 * sp * sigma[(gp, last)];
                (sm * delta[gm] + sp * delta[gp], (var.max(0.0) / n).sqrt())
            };
            for (sm, sp) in [(1.0, 1.0), (1.0, -1.0)] {
                let (b, se) = witness(sm, sp);
                let (b2, se2) = witness(-sm, -sp);
                for (bias, s) in [(b, se), (b2, se2)] {
                    prop_assert!(ci.lower <= f.tau + bias - z * s + slack);
                    prop_assert!(ci.upper >= f.tau + bias + z * s - slack);
                }
                let (neg, pos) = if b <= 0.0 { (se, se2) } else { (se2, se) };
                prop_assert!(ci.lower <= f.tau - z * neg + slack);
                prop_assert!(ci.upper >= f.tau + z * pos - slack);
            }
        }
    }
    Ok(())
}

/// Noise-free polynomial data of the fitted order give a point interval at
/// the true jump.
pub fn check_bme_degenerate(c: &Case, coefs: &[f64; 6], jump: f64) -> Check {
    let y: Vec<f64> = c
        .x
        .iter()
        .map(|&x| {
            let (side, offset) = if x >= 0.0 { (&coefs[3..], jump) } else { (&coefs[..3], 0.0) };
            // shared intercept, so the only jump at zero is `jump`
            coefs[0] + offset + (1..=c.p).map(|j| side[j] * x.powi(j as i32)).sum::<f64>()
        })
        .collect();
    let (f, g) = c.with_y(y).fit();
    let ci = bme_from_fit(&f, &g, 0.95).unwrap().ci;
    let scale = 1.0 + coefs.iter().fold(0.0_f64, |m, v| m.max(v.abs())) + jump.abs();
    prop_assert!((ci.lower - jump).abs() <= 1e-8 * scale, "lower {} vs {}", ci.lower, jump);
    prop_assert!((ci.upper - jump).abs() <= 1e-8 * scale, "upper {} vs {}", ci.upper, jump);
    Ok(())
}

/// Adding `a + b x` to y leaves both smoothness bounds unchanged, and the
/// lower bound never exceeds the point estimate.
pub fn check_smoothness_affine(x: &[f64], y: &[f64], a: f64, b: f64) -> Check {
    let cfg = SmoothnessConfig {
        s: 2,
        level: 0.95,
        draws: 2_000,
        seed: 11,
    };
    let base = k_lower_bound_with(&Sample::from_xy(x, y).unwrap().group(), &cfg).unwrap();
    let y2: Vec<f64> = x.iter().zip(y).map(|(&xi, &yi)| yi + a + b * xi).collect();
    let moved = k_lower_bound_with(&Sample::from_xy(x, &y2).unwrap().group(), &cfg).unwrap();
    let scale = base.k_point.max(1e-12);
    ensure_close!(base.k_point, moved.k_point, scale, 1e-6, "K point under affine shift");
    ensure_close!(base.k_lower, moved.k_lower, scale, 1e-6, "K lower under affine shift");
    prop_assert!(base.k_lower <= base.k_point * (1.0 + 1e-9), "{} > {}", base.k_lower, base.k_point);
    Ok(())
}

/// Orthogonality, the trace identity, nonnegative influence weights and the
/// homoskedastic split of the fixed-G expectation.
pub fn check_population(p: usize, support: &[f64], pi: &[f64], mu: &[f64], sigma2: f64) -> Check {
    let total: f64 = pi.iter().sum();
    let pi: Vec<f64> = pi.iter().map(|v| v / total).collect();
    let design = Design::new(p, f64::INFINITY).unwrap();
    let pd = PopulationDesign::new(
        support.to_vec(),
        pi.clone(),
        mu.to_vec(),
        vec![sigma2; support.len()],
        design,
        0.0,
    )
    .unwrap();
    let pf = population_fit(&pd).unwrap();
    let k = design.k();
    let mscale = 1.0 + mu.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    for j in 0..k {
        let s: f64 = (0..support.len())
            .map(|g| pi[g] * build_basis(support[g], p)[j] * pf.delta[g])
            .sum();
        prop_assert!(s.abs() <= 1e-10 * mscale, "orthogonality, column {}: {}", j, s);
    }
    let report = decompose(&pd, 500).unwrap();
    ensure_close!(report.leverage_trace, k as f64, 0.0, 1e-8, "trace identity");
    prop_assert!(report.omega.iter().all(|&w| w >= -1e-12), "negative influence weight");
    let reassembled: f64 = report.omega.iter().map(|w| w * sigma2).sum();
    ensure_close!(reassembled, report.sigma2_tau, 0.0, 1e-12, "sigma2_tau");
    let split = report.sigma2_tau * (1.0 + report.t1 + report.t2);
    ensure_close!(report.fixed_g_expectation, split, report.sigma2_tau, 1e-9, "homoskedastic split");
    Ok(())
}
