//! Data-driven lower bound on the second-derivative constant `K`.
//!
//! On each side of the cutoff the support points are pooled, nearest first,
//! into blocks of `s` points. Every three consecutive blocks give an
//! estimate of a weighted average of `mu''` that is free of affine trends;
//! `K` must be at least the absolute value of each such average. The bound
//! inverts a sup-t statistic over all triples.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::GroupedSample;
use crate::error::{RdError, Result};
use crate::rng;
use crate::variance::check_level;

pub const DEFAULT_BLOCK_SIZE: usize = 2;
pub const DEFAULT_DRAWS: usize = 100_000;
const CHUNK: usize = 10_000;
const COLLINEAR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Below,
    Above,
}

/// Observation-weighted summaries of a block of support points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Block {
    pub n: usize,
    pub x_mean: f64,
    pub x2_mean: f64,
    pub y_mean: f64,
    /// Variance of `y_mean`, `sum n_g s_g^2 / n^2`.
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntervalTriple {
    pub side: Side,
    /// Inner, middle and outer block.
    pub blocks: [Block; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TripleEstimate {
    pub side: Side,
    pub delta: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothnessBound {
    pub k_point: f64,
    pub k_lower: f64,
    pub level: f64,
    pub s: usize,
    pub sup_t: f64,
    pub draws: usize,
    pub seed: u64,
    pub triples: Vec<TripleEstimate>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessConfig {
    pub s: usize,
    pub level: f64,
    pub draws: usize,
    pub seed: u64,
}

impl Default for SmoothnessConfig {
    fn default() -> Self {
        Self {
            s: DEFAULT_BLOCK_SIZE,
            level: 0.95,
            draws: DEFAULT_DRAWS,
            seed: 0,
        }
    }
}

fn block(grouped: &GroupedSample, indices: &[usize]) -> Block {
    let n: usize = indices.iter().map(|&g| grouped.counts[g]).sum();
    let nf = n as f64;
    let mut x = 0.0;
    let mut x2 = 0.0;
    let mut y = 0.0;
    let mut v = 0.0;
    for &g in indices {
        let w = grouped.counts[g] as f64;
        let xg = grouped.support[g];
        x += w * xg;
        x2 += w * xg * xg;
        y += w * grouped.means[g];
        v += w * grouped.variances[g];
    }
    Block {
        n,
        x_mean: x / nf,
        x2_mean: x2 / nf,
        y_mean: y / nf,
        v: v / (nf * nf),
    }
}

fn side_triples(grouped: &GroupedSample, side: Side, order: &[usize], s: usize) -> Vec<IntervalTriple> {
    let blocks: Vec<Block> = order.chunks_exact(s).map(|c| block(grouped, c)).collect();
    blocks
        .chunks_exact(3)
        .map(|b| IntervalTriple {
            side,
            blocks: [b[0], b[1], b[2]],
        })
        .collect()
}

/// Triples of consecutive blocks of `s` support points on each side,
/// below the cutoff first.
pub fn build_triples(grouped: &GroupedSample, s: usize) -> Result<Vec<IntervalTriple>> {
    if s == 0 {
        return Err(RdError::InvalidInput("block size must be at least 1".into()));
    }
    // support is sorted ascending, so nearest-first is reversed below the cutoff
    let below: Vec<usize> = (0..grouped.g_minus).rev().collect();
    let above: Vec<usize> = (grouped.g_minus..grouped.len()).collect();
    let mut out = side_triples(grouped, Side::Below, &below, s);
    out.extend(side_triples(grouped, Side::Above, &above, s));
    Ok(out)
}

/// Estimate of the weighted average second derivative over a triple and
/// its standard deviation.
pub fn delta_hat(triple: &IntervalTriple) -> Result<(f64, f64)> {
    let [b1, b2, b3] = &triple.blocks;
    let spread = b3.x_mean - b1.x_mean;
    if spread == 0.0 {
        return Err(RdError::Smoothness("blocks share the same mean".into()));
    }
    let lambda = (b3.x_mean - b2.x_mean) / spread;
    let d = (1.0 - lambda) * b3.x2_mean + lambda * b1.x2_mean - b2.x2_mean;
    let scale = b1.x2_mean.abs().max(b2.x2_mean.abs()).max(b3.x2_mean.abs());
    if !(d.abs() >= COLLINEAR * scale) || d == 0.0 {
        return Err(RdError::Smoothness(format!(
            "collinear blocks (curvature denominator {d:e})"
        )));
    }
    let delta = 2.0 * (lambda * b1.y_mean + (1.0 - lambda) * b3.y_mean - b2.y_mean) / d;
    let var = 4.0 * (lambda * lambda * b1.v + (1.0 - lambda).powi(2) * b3.v + b2.v);
    Ok((delta, var.sqrt() / d.abs()))
}

/// Reusable draws for the sup-t reference distribution.
#[derive(Debug, Clone)]
pub struct SupTSimulator {
    inv_sd: Vec<f64>,
    draws: usize,
    /// Row-major `draws x J` standard normals.
    z: Vec<f64>,
}

impl SupTSimulator {
    pub fn new(sds: &[f64], draws: usize, seed: u64) -> Result<Self> {
        if sds.is_empty() {
            return Err(RdError::Smoothness("no triples to simulate".into()));
        }
        if sds.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(RdError::Smoothness("standard deviations must be positive".into()));
        }
        if draws == 0 {
            return Err(RdError::InvalidInput("need at least one draw".into()));
        }
        let j = sds.len();
        let chunks = draws.div_ceil(CHUNK);
        let z: Vec<f64> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let len = CHUNK.min(draws - c * CHUNK) * j;
                let mut r = rng::stream(seed, c as u64);
                (0..len).map(|_| StandardNormal.sample(&mut r)).collect::<Vec<f64>>()
            })
            .collect::<Vec<_>>()
            .concat();
        Ok(Self {
            inv_sd: sds.iter().map(|s| 1.0 / s).collect(),
            draws,
            z,
        })
    }

    /// `level` quantile of `max_j |Z_j + k0 / sd_j|`.
    pub fn quantile(&self, k0: f64, level: f64) -> f64 {
        let j = self.inv_sd.len();
        let shift: Vec<f64> = self.inv_sd.iter().map(|w| k0 * w).collect();
        let mut maxima: Vec<f64> = self
            .z
            .par_chunks(j)
            .map(|row| {
                row.iter()
                    .zip(&shift)
                    .map(|(z, m)| (z + m).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        let rank = ((level * self.draws as f64).ceil() as usize).clamp(1, self.draws) - 1;
        let (_, v, _) = maxima.select_nth_unstable_by(rank, f64::total_cmp);
        *v
    }
}

pub fn sup_t_quantile(sds: &[f64], k0: f64, level: f64, draws: usize, seed: u64) -> Result<f64> {
    check_level(level)?;
    Ok(SupTSimulator::new(sds, draws, seed)?.quantile(k0, level))
}

/// Smallest `K` whose sup-t quantile reaches the observed statistic.
fn invert(sim: &SupTSimulator, sup_t: f64, level: f64) -> f64 {
    if sup_t <= sim.quantile(0.0, level) {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = sup_t / sim.inv_sd.iter().fold(0.0_f64, |m, w| m.max(*w));
    while sim.quantile(hi, level) < sup_t {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let q = sim.quantile(mid, level);
        if (q - sup_t).abs() <= 1e-4 * sup_t {
            return mid;
        }
        if q < sup_t {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

pub fn k_lower_bound(grouped: &GroupedSample, s: usize, level: f64, seed: u64) -> Result<SmoothnessBound> {
    k_lower_bound_with(
        grouped,
        &SmoothnessConfig {
            s,
            level,
            seed,
            ..SmoothnessConfig::default()
        },
    )
}

pub fn k_lower_bound_with(grouped: &GroupedSample, cfg: &SmoothnessConfig) -> Result<SmoothnessBound> {
    check_level(cfg.level)?;
    let mut warnings = Vec::new();
    let mut triples = Vec::new();
    for t in build_triples(grouped, cfg.s)? {
        match delta_hat(&t) {
            Ok((delta, sd)) => triples.push(TripleEstimate {
                side: t.side,
                delta,
                sd,
            }),
            Err(e) => warnings.push(format!("skipped a {:?} triple: {e}", t.side).to_lowercase()),
        }
    }
    if triples.is_empty() {
        return Err(RdError::Smoothness(format!(
            "no usable triples with blocks of {} support points",
            cfg.s
        )));
    }

    // Triples estimated without noise bound K exactly; only the rest enter
    // the sup-t inversion.
    let exact = triples
        .iter()
        .filter(|t| t.sd == 0.0)
        .fold(0.0_f64, |m, t| m.max(t.delta.abs()));
    let noisy: Vec<&TripleEstimate> = triples.iter().filter(|t| t.sd > 0.0).collect();
    let (k_point, k_lower, sup_t) = if noisy.is_empty() {
        warnings.push("all triples have zero variance; the bound is their largest curvature".into());
        (exact, exact, 0.0)
    } else {
        if exact > 0.0 || noisy.len() < triples.len() {
            warnings.push(format!(
                "{} triples have zero variance and act as a floor on K",
                triples.len() - noisy.len()
            ));
        }
        let sds: Vec<f64> = noisy.iter().map(|t| t.sd).collect();
        let sup_t = noisy
            .iter()
            .map(|t| t.delta.abs() / t.sd)
            .fold(0.0_f64, f64::max);
        let sim = SupTSimulator::new(&sds, cfg.draws, cfg.seed)?;
        let point = invert(&sim, sup_t, 0.5).max(exact);
        let lower = invert(&sim, sup_t, cfg.level).max(exact);
        (point, lower, sup_t)
    };

    Ok(SmoothnessBound {
        k_point,
        k_lower,
        level: cfg.level,
        s: cfg.s,
        sup_t,
        draws: cfg.draws,
        seed: cfg.seed,
        triples,
        warnings,
    })
}
