//! Named interval methods behind a common trait.
//!
//! A method spec is a name with an optional `:parameter`, e.g. `ehw`,
//! `crv`, `bm` or `bsd:0.493`. The registry maps names to factories so the
//! CLI and the simulation engine can select methods at runtime.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::basis::FitResult;
use crate::data::GroupedSample;
use crate::dist::two_sided_z;
use crate::error::{RdError, Result};
use crate::honest::{bme_from_fit, bsd_from_fit, BsdVariance};
use crate::variance::{self, wald_ci, ConfidenceInterval, VarianceEstimate, VarianceMethod};

/// Settings shared by every method built from one registry call.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub level: f64,
    pub stata_factor: bool,
    /// Smoothness constant for `bsd` given without a parameter.
    pub k: Option<f64>,
    pub bsd_variance: BsdVariance,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            level: 0.95,
            stata_factor: true,
            k: None,
            bsd_variance: BsdVariance::Nn,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EstimationContext<'a> {
    pub fit: &'a FitResult,
    pub grouped: &'a GroupedSample,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodOutcome {
    pub method: String,
    pub ci: ConfidenceInterval,
    /// Standard error the interval is built from.
    pub se: f64,
    /// Width over `2 z_{1-alpha/2}`, comparable across Wald and honest intervals.
    pub normalized_se: f64,
    pub sigma2: Option<f64>,
    pub dof: Option<f64>,
    pub k: Option<f64>,
    pub max_bias: Option<f64>,
    pub stata_factor_applied: bool,
    pub warnings: Vec<String>,
}

pub trait IntervalMethod: Send + Sync {
    /// Display label, e.g. `EHW` or `BSD(K=0.493)`.
    fn name(&self) -> String;
    /// Column-safe lowercase label.
    fn key(&self) -> String;
    fn evaluate(&self, ctx: &EstimationContext<'_>) -> Result<MethodOutcome>;
}

fn normalized(ci: &ConfidenceInterval) -> f64 {
    ci.width() / (2.0 * two_sided_z(ci.level))
}

fn wald_outcome(name: String, tau: f64, ve: VarianceEstimate, level: f64) -> Result<MethodOutcome> {
    let mut ci = wald_ci(tau, &ve, level)?;
    ci.method = name.clone();
    Ok(MethodOutcome {
        method: name,
        normalized_se: normalized(&ci),
        ci,
        se: ve.se,
        sigma2: Some(ve.sigma2),
        dof: ve.dof,
        k: None,
        max_bias: None,
        stata_factor_applied: ve.stata_factor_applied,
        warnings: ve.warnings,
    })
}

struct Wald {
    method: VarianceMethod,
    level: f64,
    stata_factor: bool,
}

impl IntervalMethod for Wald {
    fn name(&self) -> String {
        self.method.to_string()
    }

    fn key(&self) -> String {
        self.name().to_lowercase()
    }

    fn evaluate(&self, ctx: &EstimationContext<'_>) -> Result<MethodOutcome> {
        let ve = variance::estimate(self.method, ctx.fit, ctx.grouped, self.stata_factor)?;
        wald_outcome(self.name(), ctx.fit.tau, ve, self.level)
    }
}

struct BellMcCaffrey {
    level: f64,
}

impl IntervalMethod for BellMcCaffrey {
    fn name(&self) -> String {
        "BM".into()
    }

    fn key(&self) -> String {
        "bm".into()
    }

    fn evaluate(&self, ctx: &EstimationContext<'_>) -> Result<MethodOutcome> {
        let ve = variance::crv2_bm(ctx.fit, ctx.grouped)?;
        wald_outcome(self.name(), ctx.fit.tau, ve, self.level)
    }
}

struct Bme {
    level: f64,
}

impl IntervalMethod for Bme {
    fn name(&self) -> String {
        "BME".into()
    }

    fn key(&self) -> String {
        "bme".into()
    }

    fn evaluate(&self, ctx: &EstimationContext<'_>) -> Result<MethodOutcome> {
        let res = bme_from_fit(ctx.fit, ctx.grouped, self.level)?;
        Ok(MethodOutcome {
            method: self.name(),
            normalized_se: normalized(&res.ci),
            se: res.se_used,
            ci: res.ci,
            sigma2: None,
            dof: None,
            k: None,
            max_bias: Some(res.max_bias),
            stata_factor_applied: false,
            warnings: res.warnings,
        })
    }
}

struct Bsd {
    k: f64,
    level: f64,
    variance: BsdVariance,
}

impl IntervalMethod for Bsd {
    fn name(&self) -> String {
        format!("BSD(K={})", self.k)
    }

    fn key(&self) -> String {
        format!("bsd_{}", self.k)
    }

    fn evaluate(&self, ctx: &EstimationContext<'_>) -> Result<MethodOutcome> {
        let mut res = bsd_from_fit(ctx.fit, ctx.grouped, self.k, self.level, self.variance)?;
        res.ci.method = self.name();
        Ok(MethodOutcome {
            method: self.name(),
            normalized_se: normalized(&res.ci),
            se: res.se_used,
            ci: res.ci,
            sigma2: Some(res.se_used.powi(2) * ctx.fit.n_h as f64),
            dof: None,
            k: Some(self.k),
            max_bias: Some(res.max_bias),
            stata_factor_applied: false,
            warnings: res.warnings,
        })
    }
}

type Factory = fn(&MethodConfig, Option<&str>) -> Result<Box<dyn IntervalMethod>>;

fn no_parameter(name: &str, param: Option<&str>) -> Result<()> {
    match param {
        None => Ok(()),
        Some(p) => Err(RdError::UnknownMethod(format!("{name} takes no parameter, got `{p}`"))),
    }
}

fn wald_factory(method: VarianceMethod) -> impl Fn(&MethodConfig, Option<&str>) -> Result<Box<dyn IntervalMethod>> {
    move |cfg, param| {
        no_parameter(&method.to_string().to_lowercase(), param)?;
        Ok(Box::new(Wald {
            method,
            level: cfg.level,
            stata_factor: cfg.stata_factor,
        }))
    }
}

fn parse_k(raw: &str) -> Result<f64> {
    let k: f64 = raw
        .parse()
        .map_err(|_| RdError::UnknownMethod(format!("bsd parameter `{raw}` is not a number")))?;
    if !(k >= 0.0) || !k.is_finite() {
        return Err(RdError::InvalidInput(format!("K must be finite and nonnegative, got {k}")));
    }
    Ok(k)
}

#[derive(Clone)]
pub struct MethodRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

impl Default for MethodRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

impl MethodRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// EHW, CRV, CRV2, BM, NN, BME and BSD.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register("ehw", |c, p| wald_factory(VarianceMethod::Ehw)(c, p));
        r.register("crv", |c, p| wald_factory(VarianceMethod::Crv)(c, p));
        r.register("crv2", |c, p| wald_factory(VarianceMethod::Crv2)(c, p));
        r.register("nn", |c, p| wald_factory(VarianceMethod::Nn)(c, p));
        r.register("bm", |c, p| {
            no_parameter("bm", p)?;
            Ok(Box::new(BellMcCaffrey { level: c.level }))
        });
        r.register("bme", |c, p| {
            no_parameter("bme", p)?;
            Ok(Box::new(Bme { level: c.level }))
        });
        r.register("bsd", |c, p| {
            let k = match (p, c.k) {
                (Some(raw), _) => parse_k(raw)?,
                (None, Some(k)) => parse_k(&k.to_string())?,
                (None, None) => {
                    return Err(RdError::InvalidInput(
                        "bsd needs a smoothness constant, e.g. `bsd:0.5` or --k".into(),
                    ))
                }
            };
            Ok(Box::new(Bsd {
                k,
                level: c.level,
                variance: c.bsd_variance,
            }))
        });
        r
    }

    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    /// Builds a method from a spec such as `crv` or `bsd:0.493`.
    pub fn build(&self, spec: &str, cfg: &MethodConfig) -> Result<Box<dyn IntervalMethod>> {
        variance::check_level(cfg.level)?;
        let spec = spec.trim();
        let (name, param) = match spec.split_once(':') {
            Some((n, p)) => (n.trim(), Some(p.trim())),
            None => (spec, None),
        };
        let lower = name.to_ascii_lowercase();
        let factory = self.factories.get(lower.as_str()).ok_or_else(|| {
            RdError::UnknownMethod(format!(
                "unknown method `{name}` (known: {})",
                self.names().join(", ")
            ))
        })?;
        factory(cfg, param)
    }

    pub fn build_all<S: AsRef<str>>(&self, specs: &[S], cfg: &MethodConfig) -> Result<Vec<Box<dyn IntervalMethod>>> {
        specs.iter().map(|s| self.build(s.as_ref(), cfg)).collect()
    }
}
