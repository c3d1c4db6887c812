use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use rdinfer_core::methods::{MethodConfig, MethodRegistry};
use rdinfer_core::montecarlo::{
    self, Cef, DgpSpec, EmpiricalPopulation, PopulationFileSpec, SampleSource, SimulationConfig,
    SimulationResult, Target,
};
use rdinfer_core::{load_csv, Design};

use crate::output::{human, human_opt, write_json, Format, Table};

/// Method set used by `--methods all`.
pub const ALL_METHODS: [&str; 7] = ["ehw", "crv", "crv2", "bm", "bme", "bsd:0.493", "bsd:0.986"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DgpKind {
    Linear,
    Sin,
    Cos,
    WorstCase,
}

/// Synthetic design flags shared by `simulate` and `decompose`.
#[derive(Debug, clap::Args)]
pub struct DgpArgs {
    /// Conditional expectation of the outcome.
    #[arg(long, value_enum, default_value = "linear")]
    pub dgp: DgpKind,
    /// Amplitude of the sine or cosine term.
    #[arg(long, default_value_t = 0.05, allow_negative_numbers = true)]
    pub lambda: f64,
    /// Curvature bound for `--dgp worst-case`.
    #[arg(long = "k")]
    pub dgp_k: Option<f64>,
    /// Support points above then below the cutoff; repeat for a grid.
    #[arg(long, num_args = 2, value_names = ["G_PLUS", "G_MINUS"], action = clap::ArgAction::Append)]
    pub g: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub noise_variance: f64,
}

impl DgpArgs {
    pub fn cef(&self) -> Result<Cef> {
        Ok(match self.dgp {
            DgpKind::Linear => Cef::linear(),
            DgpKind::Sin => Cef::sine(self.lambda),
            DgpKind::Cos => Cef::cosine(self.lambda),
            DgpKind::WorstCase => match self.dgp_k {
                Some(k) if k >= 0.0 => Cef::WorstCase { k },
                Some(k) => bail!("--k must be nonnegative, got {k}"),
                None => bail!("--dgp worst-case needs --k"),
            },
        })
    }

    /// `(G+, G-)` pairs, defaulting to `(5, 5)`.
    pub fn grid(&self) -> Vec<(usize, usize)> {
        if self.g.is_empty() {
            return vec![(5, 5)];
        }
        self.g.chunks(2).map(|c| (c[0], c[1])).collect()
    }

    pub fn spec(&self, g_plus: usize, g_minus: usize, n: usize) -> Result<DgpSpec> {
        let mut spec = DgpSpec::new(g_minus, g_plus, n, self.cef()?);
        spec.noise_variance = self.noise_variance;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TargetArg {
    TrueTau,
    TauH,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::TrueTau => Target::TrueTau,
            TargetArg::TauH => Target::TauH,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    dgp: DgpArgs,
    /// Sample sizes; comma-separated or repeated.
    #[arg(long, value_delimiter = ',', default_value = "100")]
    n: Vec<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..), default_value_t = 1000)]
    reps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated method specs, or `all`.
    #[arg(long, value_delimiter = ',', default_value = "ehw,crv")]
    methods: Vec<String>,
    #[arg(long, value_enum, default_value = "true-tau")]
    target: TargetArg,
    #[arg(long, default_value_t = 1)]
    order: usize,
    /// Window half-width, or `inf`.
    #[arg(long, default_value_t = f64::INFINITY)]
    bandwidth: f64,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    no_stata_factor: bool,
    /// Resample from this CSV instead of a synthetic design.
    #[arg(long)]
    population: Option<PathBuf>,
    #[arg(long, default_value = "x")]
    x_column: String,
    #[arg(long, default_value = "y")]
    y_column: String,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    cutoff: f64,
    /// Draw population rows without replacement.
    #[arg(long)]
    without_replacement: bool,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Write to this file instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

pub fn expand_methods(specs: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for s in specs {
        if s.trim().eq_ignore_ascii_case("all") {
            out.extend(ALL_METHODS.iter().map(|m| m.to_string()));
        } else if !s.trim().is_empty() {
            out.push(s.trim().to_string());
        }
    }
    out
}

fn sources(args: &Args, design: &Design) -> Result<Vec<SampleSource>> {
    let mut out = Vec::new();
    if let Some(path) = &args.population {
        if !args.dgp.g.is_empty() {
            bail!("--g does not apply with --population");
        }
        let population = load_csv(path, &args.x_column, &args.y_column, args.cutoff)?;
        for &n in &args.n {
            let spec = PopulationFileSpec {
                path: path.clone(),
                x_column: args.x_column.clone(),
                y_column: args.y_column.clone(),
                cutoff: args.cutoff,
                h: design.bandwidth,
                n_h: n,
                with_replacement: !args.without_replacement,
            };
            out.push(SampleSource::Empirical(EmpiricalPopulation::from_sample(spec, &population)?));
        }
    } else {
        for (g_plus, g_minus) in args.dgp.grid() {
            for &n in &args.n {
                out.push(SampleSource::Synthetic(args.dgp.spec(g_plus, g_minus, n)?));
            }
        }
    }
    Ok(out)
}

pub fn run<W: Write>(args: Args, stdout: W) -> Result<()> {
    let specs = expand_methods(&args.methods);
    if specs.is_empty() {
        bail!("--methods must name at least one method");
    }
    let cfg = MethodConfig {
        level: args.level,
        stata_factor: !args.no_stata_factor,
        ..MethodConfig::default()
    };
    let methods = MethodRegistry::standard().build_all(&specs, &cfg)?;
    let design = Design::new(args.order, args.bandwidth)?;
    let sim = SimulationConfig {
        design,
        reps: args.reps as usize,
        seed: args.seed,
        target: args.target.into(),
        threads: None,
        stata_factor: cfg.stata_factor,
    };
    let results = sources(&args, &design)?
        .iter()
        .map(|source| {
            montecarlo::run(source, &methods, &sim).with_context(|| source.describe())
        })
        .collect::<Result<Vec<_>>>()?;

    match &args.output {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
            write(&results, args.format, BufWriter::new(file))
        }
        None => write(&results, args.format, stdout),
    }
}

fn write<W: Write>(results: &[SimulationResult], format: Format, mut out: W) -> Result<()> {
    match format {
        Format::Csv => montecarlo::write_csv(results, &mut out)?,
        Format::Json => write_json(&mut out, &results)?,
        Format::Table => {
            for r in results {
                writeln!(
                    out,
                    "{}   N = {}   reps = {}   seed = {}   target {} = {}",
                    r.source,
                    r.n,
                    r.reps,
                    r.seed,
                    r.target,
                    human(r.target_value)
                )?;
                writeln!(
                    out,
                    "mean tau_hat = {}   sd = {}   P(CRV > EHW) = {}",
                    human(r.mean_tau),
                    human(r.sd_tau),
                    human(r.rate_crv_gt_ehw)
                )?;
                let mut t = Table::new(["method", "avg se", "avg norm se", "avg dof", "coverage %"]);
                for m in &r.methods {
                    t.push(vec![
                        m.method.clone(),
                        human(m.avg_se),
                        human(m.avg_norm_se),
                        human_opt(m.avg_dof),
                        format!("{:.1}", 100.0 * m.coverage),
                    ]);
                }
                writeln!(out, "{}", t.render())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
