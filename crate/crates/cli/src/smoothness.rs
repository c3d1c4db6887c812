use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use rdinfer_core::load_csv;
use rdinfer_core::smoothness::{k_lower_bound_with, SmoothnessConfig};

use crate::output::{exact, human, write_json, Format, Table};

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "x")]
    x_column: String,
    #[arg(long, default_value = "y")]
    y_column: String,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    cutoff: f64,
    /// Support points per block.
    #[arg(long, default_value_t = 2)]
    s: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

pub fn run<W: Write>(args: Args, mut out: W) -> Result<()> {
    let sample = load_csv(&args.input, &args.x_column, &args.y_column, args.cutoff)?;
    let cfg = SmoothnessConfig {
        s: args.s,
        level: args.level,
        draws: args.draws,
        seed: args.seed,
    };
    let bound = k_lower_bound_with(&sample.group(), &cfg)?;
    match args.format {
        Format::Json => write_json(out, &bound),
        Format::Csv => {
            let mut t = Table::new(["k_point", "k_lower", "level", "s", "sup_t", "triples", "draws", "seed"]);
            t.push(vec![
                exact(bound.k_point),
                exact(bound.k_lower),
                exact(bound.level),
                bound.s.to_string(),
                exact(bound.sup_t),
                bound.triples.len().to_string(),
                bound.draws.to_string(),
                bound.seed.to_string(),
            ]);
            t.write_csv(out)
        }
        Format::Table => {
            writeln!(out, "K_hat (median unbiased) = {}", human(bound.k_point))?;
            writeln!(
                out,
                "{}% lower bound on K     = {}",
                human(100.0 * bound.level),
                human(bound.k_lower)
            )?;
            writeln!(
                out,
                "sup-t = {}   triples = {}   s = {}   draws = {}   seed = {}\n",
                human(bound.sup_t),
                bound.triples.len(),
                bound.s,
                bound.draws,
                bound.seed
            )?;
            let mut t = Table::new(["side", "delta", "sd"]);
            for tr in &bound.triples {
                t.push(vec![format!("{:?}", tr.side).to_lowercase(), human(tr.delta), human(tr.sd)]);
            }
            write!(out, "{}", t.render())?;
            for w in &bound.warnings {
                writeln!(out, "warning: {w}")?;
            }
            Ok(())
        }
    }
}
