//! Replication engine for coverage and standard-error studies.
//!
//! Replication `r` draws from its own generator seeded by a mix of the run
//! seed and `r`, and results are reduced in replication order, so a run is
//! bit-identical for any number of worker threads.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::asymptotics::{population_fit, PopulationDesign};
use crate::basis::{fit_windowed, Design};
use crate::data::{load_csv, Observation, Sample};
use crate::error::{RdError, Result};
use crate::methods::{EstimationContext, IntervalMethod};
use crate::rng;
use crate::variance;

/// Conditional expectation of the outcome in a synthetic design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Cef {
    /// `x + lambda1 sin(pi x) + lambda2 cos(pi x)`.
    Trig { lambda1: f64, lambda2: f64 },
    /// `-(k/2) x^2 sign(x)`: the least favorable function for a bound `k`
    /// on the second derivative, with no jump at zero.
    WorstCase { k: f64 },
}

impl Cef {
    pub fn linear() -> Self {
        Cef::Trig {
            lambda1: 0.0,
            lambda2: 0.0,
        }
    }

    pub fn sine(lambda: f64) -> Self {
        Cef::Trig {
            lambda1: lambda,
            lambda2: 0.0,
        }
    }

    pub fn cosine(lambda: f64) -> Self {
        Cef::Trig {
            lambda1: 0.0,
            lambda2: lambda,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Cef::Trig { lambda1, lambda2 } => x + lambda1 * (PI * x).sin() + lambda2 * (PI * x).cos(),
            Cef::WorstCase { k } => {
                let s = if x >= 0.0 { 1.0 } else { -1.0 };
                -0.5 * k * x * x * s
            }
        }
    }
}

impl fmt::Display for Cef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Cef::Trig { lambda1: 0.0, lambda2: 0.0 } => write!(f, "linear"),
            Cef::Trig { lambda1, lambda2: 0.0 } => write!(f, "sin({lambda1})"),
            Cef::Trig { lambda1: 0.0, lambda2 } => write!(f, "cos({lambda2})"),
            Cef::Trig { lambda1, lambda2 } => write!(f, "trig({lambda1},{lambda2})"),
            Cef::WorstCase { k } => write!(f, "worst-case({k})"),
        }
    }
}

/// Equally spaced support on `[-1, 0)` and `(0, 1]` with half the mass on
/// each side, Gaussian noise and no treatment effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DgpSpec {
    pub g_minus: usize,
    pub g_plus: usize,
    pub n: usize,
    pub noise_variance: f64,
    pub cef: Cef,
}

impl DgpSpec {
    pub fn new(g_minus: usize, g_plus: usize, n: usize, cef: Cef) -> Self {
        Self {
            g_minus,
            g_plus,
            n,
            noise_variance: 0.1,
            cef,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.g_minus == 0 || self.g_plus == 0 {
            return Err(RdError::InvalidInput("need support points on both sides".into()));
        }
        if self.n == 0 {
            return Err(RdError::InvalidInput("sample size must be positive".into()));
        }
        if !(self.noise_variance >= 0.0) || !self.noise_variance.is_finite() {
            return Err(RdError::InvalidInput(format!(
                "noise variance must be nonnegative, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    pub fn below(&self) -> Vec<f64> {
        let g = self.g_minus as f64;
        (0..self.g_minus).map(|i| -((self.g_minus - i) as f64) / g).collect()
    }

    pub fn above(&self) -> Vec<f64> {
        let g = self.g_plus as f64;
        (1..=self.g_plus).map(|i| i as f64 / g).collect()
    }

    /// Support in ascending order.
    pub fn support(&self) -> Vec<f64> {
        let mut s = self.below();
        s.extend(self.above());
        s
    }

    pub fn true_tau(&self) -> f64 {
        0.0
    }

    /// Population restricted to the window of `design`.
    pub fn population(&self, design: Design) -> Result<PopulationDesign> {
        let support = self.support();
        let pi: Vec<f64> = support
            .iter()
            .map(|&x| {
                let g = if x < 0.0 { self.g_minus } else { self.g_plus };
                0.5 / g as f64
            })
            .collect();
        let mu: Vec<f64> = support.iter().map(|&x| self.cef.eval(x)).collect();
        let sigma2 = vec![self.noise_variance; support.len()];
        PopulationDesign::windowed(&support, &pi, &mu, &sigma2, design, self.true_tau())
    }
}

pub fn draw_synthetic(spec: &DgpSpec, seed: u64, rep: u64) -> Result<Sample> {
    spec.validate()?;
    let below = spec.below();
    let above = spec.above();
    let sd = spec.noise_variance.sqrt();
    let mut r = rng::stream(seed, rep);
    let mut obs = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let side = if r.random_bool(0.5) { &above } else { &below };
        let x = side[r.random_range(0..side.len())];
        let z: f64 = StandardNormal.sample(&mut r);
        obs.push(Observation {
            x,
            y: spec.cef.eval(x) + sd * z,
        });
    }
    Sample::new(obs)
}

/// Resampling plan for a population stored in a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationFileSpec {
    pub path: PathBuf,
    pub x_column: String,
    pub y_column: String,
    pub cutoff: f64,
    pub h: f64,
    pub n_h: usize,
    pub with_replacement: bool,
}

/// Windowed rows of a population, loaded once and resampled.
#[derive(Debug, Clone)]
pub struct EmpiricalPopulation {
    pub spec: PopulationFileSpec,
    pub window: Vec<Observation>,
}

impl EmpiricalPopulation {
    pub fn load(spec: PopulationFileSpec) -> Result<Self> {
        let sample = load_csv(&spec.path, &spec.x_column, &spec.y_column, spec.cutoff)?;
        Self::from_sample(spec, &sample)
    }

    pub fn from_sample(spec: PopulationFileSpec, population: &Sample) -> Result<Self> {
        if spec.n_h == 0 {
            return Err(RdError::InvalidInput("draw size must be at least 1".into()));
        }
        let window = population.window(spec.h)?.observations().to_vec();
        if !spec.with_replacement && spec.n_h > window.len() {
            return Err(RdError::InvalidInput(format!(
                "cannot draw {} rows without replacement from a window of {}",
                spec.n_h,
                window.len()
            )));
        }
        Ok(Self { spec, window })
    }

    /// Jump of the local polynomial fit on the whole windowed population.
    pub fn tau_h(&self, design: &Design) -> Result<f64> {
        let sample = Sample::new(self.window.clone())?;
        Ok(fit_windowed(&sample, design)?.tau)
    }
}

pub fn draw_empirical(pop: &EmpiricalPopulation, seed: u64, rep: u64) -> Result<Sample> {
    let mut r = rng::stream(seed, rep);
    let n = pop.spec.n_h;
    let obs = if pop.spec.with_replacement {
        (0..n)
            .map(|_| pop.window[r.random_range(0..pop.window.len())])
            .collect()
    } else {
        rand::seq::index::sample(&mut r, pop.window.len(), n)
            .into_iter()
            .map(|i| pop.window[i])
            .collect()
    };
    Sample::new(obs)
}

#[derive(Debug, Clone)]
pub enum SampleSource {
    Synthetic(DgpSpec),
    Empirical(EmpiricalPopulation),
}

impl SampleSource {
    pub fn draw(&self, seed: u64, rep: u64) -> Result<Sample> {
        match self {
            SampleSource::Synthetic(spec) => draw_synthetic(spec, seed, rep),
            SampleSource::Empirical(pop) => draw_empirical(pop, seed, rep),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            SampleSource::Synthetic(spec) => spec.cef.to_string(),
            SampleSource::Empirical(pop) => pop.spec.path.display().to_string(),
        }
    }

    fn target(&self, target: Target, design: &Design) -> Result<f64> {
        match (self, target) {
            (SampleSource::Synthetic(spec), Target::TrueTau) => Ok(spec.true_tau()),
            (SampleSource::Synthetic(spec), Target::TauH) => {
                Ok(population_fit(&spec.population(*design)?)?.tau_h)
            }
            (SampleSource::Empirical(pop), _) => pop.tau_h(design),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    TrueTau,
    TauH,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::TrueTau => "true_tau",
            Target::TauH => "tau_h",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub design: Design,
    pub reps: usize,
    pub seed: u64,
    pub target: Target,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Factor applied to the CRV that is compared against EHW.
    pub stata_factor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub key: String,
    pub avg_norm_se: f64,
    pub avg_se: f64,
    /// Mean of `sigma2`; `None` for methods without a variance estimate.
    pub avg_sigma2: Option<f64>,
    pub avg_dof: Option<f64>,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationResult {
    pub source: String,
    pub g_minus: Option<usize>,
    pub g_plus: Option<usize>,
    pub n: usize,
    pub order: usize,
    pub bandwidth: f64,
    pub reps: usize,
    pub seed: u64,
    pub target: Target,
    pub target_value: f64,
    pub mean_tau: f64,
    pub sd_tau: f64,
    pub rate_crv_gt_ehw: f64,
    pub rate_crv_le_ehw: f64,
    pub methods: Vec<MethodSummary>,
}

impl SimulationResult {
    pub fn method(&self, key: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.key == key)
    }
}

struct MethodDraw {
    se: f64,
    normalized_se: f64,
    sigma2: Option<f64>,
    dof: Option<f64>,
    covered: bool,
}

struct Replication {
    tau: f64,
    crv_gt_ehw: bool,
    methods: Vec<MethodDraw>,
}

fn replicate(
    source: &SampleSource,
    methods: &[Box<dyn IntervalMethod>],
    cfg: &SimulationConfig,
    target: f64,
    rep: usize,
) -> Result<Replication> {
    let sample = source.draw(cfg.seed, rep as u64)?;
    let windowed = sample.window(cfg.design.bandwidth)?;
    let fit = fit_windowed(&windowed, &cfg.design)?;
    let grouped = fit.grouped();
    let ctx = EstimationContext {
        fit: &fit,
        grouped: &grouped,
    };
    let ehw = variance::ehw(&fit);
    let crv = variance::crv(&fit, &grouped, cfg.stata_factor)?;
    let methods = methods
        .iter()
        .map(|m| {
            m.evaluate(&ctx).map(|o| MethodDraw {
                se: o.se,
                normalized_se: o.normalized_se,
                sigma2: o.sigma2,
                dof: o.dof,
                covered: o.ci.contains(target),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Replication {
        tau: fit.tau,
        crv_gt_ehw: crv.se > ehw.se,
        methods,
    })
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

fn summarize(
    source: &SampleSource,
    methods: &[Box<dyn IntervalMethod>],
    cfg: &SimulationConfig,
    target_value: f64,
    reps: &[Replication],
) -> SimulationResult {
    let n = reps.len();
    let mean_tau = mean(reps.iter().map(|r| r.tau), n);
    let sd_tau = if n > 1 {
        (reps.iter().map(|r| (r.tau - mean_tau).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let gt = reps.iter().filter(|r| r.crv_gt_ehw).count();
    let summaries = methods
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let draws = || reps.iter().map(move |r| &r.methods[j]);
            let optional_mean = |f: fn(&MethodDraw) -> Option<f64>| {
                let vals: Option<Vec<f64>> = draws().map(f).collect();
                vals.map(|v| mean(v.into_iter(), n))
            };
            MethodSummary {
                method: m.name(),
                key: m.key(),
                avg_norm_se: mean(draws().map(|d| d.normalized_se), n),
                avg_se: mean(draws().map(|d| d.se), n),
                avg_sigma2: optional_mean(|d| d.sigma2),
                avg_dof: optional_mean(|d| d.dof),
                coverage: draws().filter(|d| d.covered).count() as f64 / n as f64,
            }
        })
        .collect();
    let (g_minus, g_plus, size) = match source {
        SampleSource::Synthetic(s) => (Some(s.g_minus), Some(s.g_plus), s.n),
        SampleSource::Empirical(p) => (None, None, p.spec.n_h),
    };
    SimulationResult {
        source: source.describe(),
        g_minus,
        g_plus,
        n: size,
        order: cfg.design.order,
        bandwidth: cfg.design.bandwidth,
        reps: n,
        seed: cfg.seed,
        target: cfg.target,
        target_value,
        mean_tau,
        sd_tau,
        rate_crv_gt_ehw: gt as f64 / n as f64,
        rate_crv_le_ehw: (n - gt) as f64 / n as f64,
        methods: summaries,
    }
}

pub fn run(
    source: &SampleSource,
    methods: &[Box<dyn IntervalMethod>],
    cfg: &SimulationConfig,
) -> Result<SimulationResult> {
    if cfg.reps == 0 {
        return Err(RdError::InvalidInput("need at least one replication".into()));
    }
    if let SampleSource::Synthetic(spec) = source {
        spec.validate()?;
    }
    let target_value = source.target(cfg.target, &cfg.design)?;
    let work = || {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| {
                replicate(source, methods, cfg, target_value, rep).map_err(|e| RdError::Replication {
                    rep,
                    seed: cfg.seed,
                    source: Box::new(e),
                })
            })
            .collect::<Vec<Result<Replication>>>()
    };
    let results = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| RdError::Internal(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    // first failure in replication order, independent of scheduling
    let reps = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(summarize(source, methods, cfg, target_value, &reps))
}

fn fmt_opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Wide CSV: one row per result, two columns per method.
pub fn write_csv<W: Write>(results: &[SimulationResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| RdError::Csv {
        path: PathBuf::from("<output>"),
        source: e,
    };
    let keys: Vec<String> = results
        .first()
        .map(|r| r.methods.iter().map(|m| m.key.clone()).collect())
        .unwrap_or_default();
    let mut header: Vec<String> = [
        "source", "g_plus", "g_minus", "n", "reps", "seed", "target", "sd_tau", "rate_crv_gt_ehw",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for k in &keys {
        header.push(format!("{k}_norm_se"));
        header.push(format!("{k}_coverage"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in results {
        let mut row = vec![
            r.source.clone(),
            fmt_opt(r.g_plus),
            fmt_opt(r.g_minus),
            r.n.to_string(),
            r.reps.to_string(),
            r.seed.to_string(),
            r.target.to_string(),
            r.sd_tau.to_string(),
            r.rate_crv_gt_ehw.to_string(),
        ];
        for m in &r.methods {
            row.push(m.avg_norm_se.to_string());
            row.push(m.coverage.to_string());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| RdError::Io {
        path: PathBuf::from("<output>"),
        source: e,
    })?;
    Ok(())
}

pub fn write_csv_file(results: &[SimulationResult], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| RdError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_csv(results, file)
}
