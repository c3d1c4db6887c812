use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use rdinfer_core::honest::{bsd_ci, BandwidthChoice, BsdInput, BsdVariance};
use rdinfer_core::methods::{EstimationContext, MethodConfig, MethodOutcome, MethodRegistry};
use rdinfer_core::smoothness::{k_lower_bound_with, SmoothnessBound, SmoothnessConfig};
use rdinfer_core::{fit, load_csv, Design};
use serde::Serialize;

use crate::output::{exact, exact_opt, human, human_opt, write_json, Format, Table};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    BsdOptimal,
}

impl FromStr for Bandwidth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("bsd-optimal") {
            return Ok(Bandwidth::BsdOptimal);
        }
        let h: f64 = s
            .parse()
            .map_err(|_| format!("expected a number, `inf` or `bsd-optimal`, got `{s}`"))?;
        if h.is_nan() || h <= 0.0 {
            return Err(format!("bandwidth must be positive, got {s}"));
        }
        Ok(Bandwidth::Fixed(h))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BsdVarianceArg {
    Nn,
    Ehw,
}

impl From<BsdVarianceArg> for BsdVariance {
    fn from(v: BsdVarianceArg) -> Self {
        match v {
            BsdVarianceArg::Nn => BsdVariance::Nn,
            BsdVarianceArg::Ehw => BsdVariance::Ehw,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// CSV file with a header row.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "x")]
    x_column: String,
    #[arg(long, default_value = "y")]
    y_column: String,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    cutoff: f64,
    /// Polynomial order on each side.
    #[arg(long, default_value_t = 1)]
    order: usize,
    /// Window half-width: a number, `inf`, or `bsd-optimal`.
    #[arg(long, default_value = "inf")]
    bandwidth: Bandwidth,
    /// Comma-separated: ehw, crv, crv2, bm, nn, bme, bsd[:K], or `all`.
    #[arg(long, value_delimiter = ',', default_value = "ehw,crv")]
    methods: Vec<String>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Smoothness constant for `bsd` entries without their own value.
    #[arg(long)]
    k: Option<f64>,
    /// Variance behind the BSD interval. `ehw` is conservative when many
    /// support points hold a single observation.
    #[arg(long, value_enum, default_value = "nn")]
    bsd_variance: BsdVarianceArg,
    /// Drop the G/(G-1) (N-1)/(N-k) small-sample factor from CRV.
    #[arg(long)]
    no_stata_factor: bool,
    /// Also report a lower confidence bound on K.
    #[arg(long)]
    smoothness: bool,
    /// Support points per block for --smoothness.
    #[arg(long, default_value_t = 2)]
    s: usize,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Debug, Serialize)]
struct Report {
    input: PathBuf,
    cutoff: f64,
    order: usize,
    /// `null` when the window is unbounded.
    bandwidth: f64,
    bandwidth_rule: &'static str,
    level: f64,
    tau: f64,
    n_h: usize,
    g_minus: usize,
    g_plus: usize,
    stata_factor: bool,
    methods: Vec<MethodOutcome>,
    smoothness: Option<SmoothnessBound>,
}

/// K for the bandwidth search: `--k`, else the first `bsd:K` entry.
fn search_k(args: &Args) -> Result<f64> {
    if let Some(k) = args.k {
        return Ok(k);
    }
    for spec in &args.methods {
        if let Some((name, param)) = spec.split_once(':') {
            if name.trim().eq_ignore_ascii_case("bsd") {
                return param
                    .trim()
                    .parse()
                    .with_context(|| format!("invalid K in `{spec}`"));
            }
        }
    }
    bail!("--bandwidth bsd-optimal needs a smoothness constant: pass --k or a `bsd:K` method")
}

/// Expands `all` to every method; `bsd` joins only when `--k` is set.
fn expand_methods(specs: &[String], k: Option<f64>) -> Vec<String> {
    let mut out = Vec::new();
    for s in specs.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        if s.eq_ignore_ascii_case("all") {
            out.extend(["ehw", "crv", "crv2", "nn", "bm", "bme"].map(String::from));
            if k.is_some() {
                out.push("bsd".into());
            }
        } else {
            out.push(s.to_string());
        }
    }
    out
}

pub fn run<W: Write>(mut args: Args, mut out: W) -> Result<()> {
    args.methods = expand_methods(&args.methods, args.k);
    if args.methods.is_empty() {
        bail!("--methods must name at least one method");
    }
    let sample = load_csv(&args.input, &args.x_column, &args.y_column, args.cutoff)?;
    let cfg = MethodConfig {
        level: args.level,
        stata_factor: !args.no_stata_factor,
        k: args.k,
        bsd_variance: args.bsd_variance.into(),
    };
    let methods = MethodRegistry::standard().build_all(&args.methods, &cfg)?;

    let (h, rule) = match args.bandwidth {
        Bandwidth::Fixed(h) => (h, "fixed"),
        Bandwidth::BsdOptimal => {
            if args.order != 1 {
                bail!("BSD requires p=1, got p={}", args.order);
            }
            let input = BsdInput {
                k: search_k(&args)?,
                level: args.level,
                bandwidth: BandwidthChoice::Optimize,
                candidate_h: None,
                variance: cfg.bsd_variance,
            };
            let best = bsd_ci(&sample, &input)?;
            (best.chosen_h.unwrap_or(f64::INFINITY), "bsd-optimal")
        }
    };
    let design = Design::new(args.order, h)?;
    let fitted = fit(&sample, &design)?;
    let grouped = fitted.grouped();
    let ctx = EstimationContext {
        fit: &fitted,
        grouped: &grouped,
    };
    let outcomes = methods
        .iter()
        .map(|m| m.evaluate(&ctx).with_context(|| format!("method {}", m.name())))
        .collect::<Result<Vec<_>>>()?;

    let smoothness = if args.smoothness {
        let scfg = SmoothnessConfig {
            s: args.s,
            level: args.level,
            draws: args.draws,
            seed: args.seed,
        };
        Some(k_lower_bound_with(&sample.group(), &scfg)?)
    } else {
        None
    };

    let report = Report {
        input: args.input,
        cutoff: args.cutoff,
        order: args.order,
        bandwidth: h,
        bandwidth_rule: rule,
        level: args.level,
        tau: fitted.tau,
        n_h: fitted.n_h,
        g_minus: grouped.g_minus,
        g_plus: grouped.g_plus,
        stata_factor: cfg.stata_factor,
        methods: outcomes,
        smoothness,
    };
    match args.format {
        Format::Json => write_json(out, &report),
        Format::Csv => csv_table(&report).write_csv(out),
        Format::Table => {
            write!(out, "{}", render(&report))?;
            Ok(())
        }
    }
}

fn csv_table(r: &Report) -> Table {
    let mut t = Table::new([
        "method",
        "tau",
        "n_h",
        "g_minus",
        "g_plus",
        "bandwidth",
        "level",
        "se",
        "normalized_se",
        "lower",
        "upper",
        "critical_value",
        "dof",
        "k",
        "max_bias",
        "stata_factor",
    ]);
    for m in &r.methods {
        t.push(vec![
            m.method.clone(),
            exact(r.tau),
            r.n_h.to_string(),
            r.g_minus.to_string(),
            r.g_plus.to_string(),
            exact(r.bandwidth),
            exact(r.level),
            exact(m.se),
            exact(m.normalized_se),
            exact(m.ci.lower),
            exact(m.ci.upper),
            exact(m.ci.critical_value),
            exact_opt(m.dof),
            exact_opt(m.k),
            exact_opt(m.max_bias),
            m.stata_factor_applied.to_string(),
        ]);
    }
    t
}

fn render(r: &Report) -> String {
    let mut s = format!(
        "tau_hat = {}   N_h = {}   G- = {}   G+ = {}   h = {} ({})   p = {}\n\n",
        human(r.tau),
        r.n_h,
        r.g_minus,
        r.g_plus,
        human(r.bandwidth),
        r.bandwidth_rule,
        r.order
    );
    let mut t = Table::new(["method", "se", "norm_se", "lower", "upper", "cv", "dof", "K", "max_bias"]);
    for m in &r.methods {
        let mut name = m.method.clone();
        if m.stata_factor_applied {
            name.push('*');
        }
        t.push(vec![
            name,
            human(m.se),
            human(m.normalized_se),
            human(m.ci.lower),
            human(m.ci.upper),
            human(m.ci.critical_value),
            human_opt(m.dof),
            human_opt(m.k),
            human_opt(m.max_bias),
        ]);
    }
    s.push_str(&t.render());
    if r.methods.iter().any(|m| m.stata_factor_applied) {
        s.push_str("* small-sample factor G/(G-1) (N-1)/(N-k) applied\n");
    }
    s.push_str(&format!("{}% intervals\n", human(100.0 * r.level)));
    for m in &r.methods {
        for w in &m.warnings {
            s.push_str(&format!("warning ({}): {w}\n", m.method));
        }
    }
    if let Some(b) = &r.smoothness {
        s.push_str(&format!(
            "\nsmoothness: K_hat = {}   {}% lower bound = {}   ({} triples, s = {})\n",
            human(b.k_point),
            human(100.0 * b.level),
            human(b.k_lower),
            b.triples.len(),
            b.s
        ));
        for w in &b.warnings {
            s.push_str(&format!("warning (smoothness): {w}\n"));
        }
    }
    s
}
