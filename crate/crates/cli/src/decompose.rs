use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rdinfer_core::asymptotics::{decompose, DecompositionReport, PopulationDesign};
use rdinfer_core::Design;
use serde::{Deserialize, Serialize};

use crate::output::{exact, human, write_json, Format, Table};
use crate::simulate::DgpArgs;

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    dgp: DgpArgs,
    /// Population table with columns x, pi, mu, sigma2 (x already centered).
    #[arg(long, conflicts_with_all = ["dgp", "g", "lambda", "dgp_k"])]
    table: Option<PathBuf>,
    /// Jump of the conditional expectation at the cutoff, for --table.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    true_tau: f64,
    /// Number of observations in the window.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    order: usize,
    #[arg(long, default_value_t = f64::INFINITY)]
    bandwidth: f64,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Debug, Deserialize)]
struct Row {
    x: f64,
    pi: f64,
    mu: f64,
    sigma2: f64,
}

fn read_table(path: &Path, design: Design, true_tau: f64) -> Result<PopulationDesign> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut rows: Vec<Row> = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        rows.push(row.with_context(|| format!("{} row {}", path.display(), i + 1))?);
    }
    if rows.is_empty() {
        bail!("{} has no rows", path.display());
    }
    rows.sort_by(|a, b| a.x.total_cmp(&b.x));
    let col = |f: fn(&Row) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let pd = PopulationDesign::windowed(
        &col(|r| r.x),
        &col(|r| r.pi),
        &col(|r| r.mu),
        &col(|r| r.sigma2),
        design,
        true_tau,
    )?;
    Ok(pd)
}

#[derive(Debug, Serialize)]
struct Output {
    source: String,
    /// Predicted ratio of the cluster-robust to the robust variance.
    variance_ratio: f64,
    #[serde(flatten)]
    report: DecompositionReport,
}

pub fn run<W: Write>(args: Args, mut out: W) -> Result<()> {
    if args.n == 0 {
        bail!("--n must be positive");
    }
    let design = Design::new(args.order, args.bandwidth)?;
    let (source, pd) = match &args.table {
        Some(path) => (path.display().to_string(), read_table(path, design, args.true_tau)?),
        None => {
            let grid = args.dgp.grid();
            if grid.len() != 1 {
                bail!("decompose takes a single --g pair");
            }
            let (g_plus, g_minus) = grid[0];
            let spec = args.dgp.spec(g_plus, g_minus, args.n)?;
            (spec.cef.to_string(), spec.population(design)?)
        }
    };
    let report = decompose(&pd, args.n)?;
    let output = Output {
        source,
        variance_ratio: report.fixed_g_expectation / report.sigma2_tau,
        report,
    };
    match args.format {
        Format::Json => write_json(out, &output),
        Format::Csv => long_table(&output).write_csv(out),
        Format::Table => {
            write!(out, "{}", render(&output))?;
            Ok(())
        }
    }
}

/// `quantity,index,value` rows; `index` is empty for scalars.
fn long_table(o: &Output) -> Table {
    let r = &o.report;
    let mut t = Table::new(["quantity", "index", "value"]);
    let mut scalar = |name: &str, v: f64| t.push(vec![name.into(), String::new(), exact(v)]);
    scalar("tau_h", r.tau_h);
    scalar("true_tau", r.true_tau);
    scalar("b", r.b);
    scalar("sigma2_tau", r.sigma2_tau);
    scalar("t1", r.t1);
    scalar("t2", r.t2);
    scalar("variance_ratio", o.variance_ratio);
    scalar("fixed_g_expectation", r.fixed_g_expectation);
    scalar("large_g_value", r.large_g_value);
    scalar("leverage_trace", r.leverage_trace);
    scalar("n_h", r.n_h as f64);
    for (name, values) in [
        ("x", &r.support),
        ("pi", &r.pi),
        ("delta", &r.delta),
        ("d", &r.d),
        ("omega", &r.omega),
        ("theta_h", &r.theta_h),
    ] {
        for (i, v) in values.iter().enumerate() {
            t.push(vec![name.into(), i.to_string(), exact(*v)]);
        }
    }
    t
}

/// Shows rounding noise relative to `scale` as zero.
fn snap(v: f64, scale: f64) -> f64 {
    if v.abs() <= 1e-10 * scale {
        0.0
    } else {
        v
    }
}

fn render(o: &Output) -> String {
    let r = &o.report;
    let scale = 1.0 + r.theta_h.iter().fold(0.0_f64, |m, t| m.max(t.abs()));
    let mut t = Table::new(["x", "pi", "delta", "sqrt(N) delta", "omega"]);
    for g in 0..r.support.len() {
        t.push(vec![
            human(r.support[g]),
            human(r.pi[g]),
            human(snap(r.delta[g], scale)),
            human(snap(r.d[g], scale * (r.n_h as f64).sqrt())),
            human(r.omega[g]),
        ]);
    }
    let mut s = format!("{}   N_h = {}   p = {}\n\n", o.source, r.n_h, r.theta_h.len() / 2 - 1);
    s.push_str(&t.render());
    let mut summary = Table::new(["quantity", "value"]);
    for (name, v) in [
        ("tau_h", snap(r.tau_h, scale)),
        ("tau_h - tau", snap(r.tau_h - r.true_tau, scale)),
        ("sigma2_tau", r.sigma2_tau),
        ("T1", snap(r.t1, 1.0)),
        ("T2", r.t2),
        ("CRV/EHW ratio", o.variance_ratio),
        ("fixed-G expectation", r.fixed_g_expectation),
        ("large-G value", r.large_g_value),
        ("leverage trace", r.leverage_trace),
    ] {
        summary.push(vec![name.into(), human(v)]);
    }
    s.push('\n');
    s.push_str(&summary.render());
    if r.approximate {
        s.push_str("variances differ across support points; T1 and T2 use the weighted average\n");
    }
    s
}
