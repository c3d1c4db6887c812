use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum RdError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("column `{column}` not found in {path}")]
    MissingColumn { path: PathBuf, column: String },

    #[error("row {row}, column `{column}`: {reason}")]
    BadCell {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("estimation window [-{bandwidth}, {bandwidth}] contains no observations")]
    EmptyWindow { bandwidth: f64 },

    #[error("{side} side of the cutoff has {found} distinct support points, at least {needed} needed for order {order}")]
    InsufficientSupport {
        side: &'static str,
        found: usize,
        needed: usize,
        order: usize,
    },

    #[error("design matrix is rank deficient (smallest/largest singular value {ratio:e})")]
    RankDeficient { ratio: f64 },

    #[error("singular population moment matrix")]
    SingularPopulation,

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("Bell-McCaffrey degrees of freedom undefined: {0}")]
    DegreesOfFreedom(String),

    #[error("no feasible bandwidth: {0}")]
    NoFeasibleBandwidth(String),

    #[error("smoothness bound: {0}")]
    Smoothness(String),

    #[error("{0}")]
    UnknownMethod(String),

    #[error("replication {rep} (seed {seed}) failed: {source}")]
    Replication {
        rep: usize,
        seed: u64,
        #[source]
        source: Box<RdError>,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, RdError>;
