mod analyze;
mod decompose;
mod output;
mod simulate;
mod smoothness;

use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

/// Inference for regression discontinuity designs with a discrete running variable.
#[derive(Debug, Parser)]
#[command(name = "rdinfer", version)]
struct Cli {
    /// Worker threads for parallel work. RD_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the jump at the cutoff and report confidence intervals.
    Analyze(analyze::Args),
    /// Run a Monte Carlo study of interval coverage.
    Simulate(simulate::Args),
    /// Decompose the cluster-robust variance bias for a population design.
    Decompose(decompose::Args),
    /// Lower confidence bound on the second-derivative bound K.
    BoundSmoothness(smoothness::Args),
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var("RD_THREADS") {
        Ok(raw) if !raw.trim().is_empty() => {
            let n: usize = raw
                .trim()
                .parse()
                .with_context(|| format!("RD_THREADS must be a positive integer, got `{raw}`"))?;
            if n == 0 {
                bail!("RD_THREADS must be a positive integer, got 0");
            }
            Ok(Some(n))
        }
        _ => match flag {
            Some(0) => bail!("--threads must be positive"),
            other => Ok(other),
        },
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("could not start the worker pool")?;
    }
    let stdout = std::io::stdout().lock();
    match cli.command {
        Command::Analyze(args) => analyze::run(args, stdout),
        Command::Simulate(args) => simulate::run(args, stdout),
        Command::Decompose(args) => decompose::run(args, stdout),
        Command::BoundSmoothness(args) => smoothness::run(args, stdout),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
