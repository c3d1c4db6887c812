//! Observations, estimation windows, and grouping by support point.
//!
//! The running variable is stored in cutoff-normalized units, so the
//! treatment indicator is always `x >= 0` and is never materialized.

use std::path::Path;

use serde::Serialize;

use crate::error::{RdError, Result};

/// A single `(x, y)` pair with `x` measured relative to the cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Observation {
    pub x: f64,
    pub y: f64,
}

impl Observation {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(RdError::InvalidInput(format!(
                "non-finite observation ({x}, {y})"
            )));
        }
        Ok(Self { x, y })
    }

    #[inline]
    pub fn is_treated(&self) -> bool {
        self.x >= 0.0
    }
}

/// Immutable, nonempty collection of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    observations: Vec<Observation>,
}

impl Sample {
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        if observations.is_empty() {
            return Err(RdError::InvalidInput("sample is empty".into()));
        }
        if let Some(bad) = observations
            .iter()
            .find(|o| !o.x.is_finite() || !o.y.is_finite())
        {
            return Err(RdError::InvalidInput(format!(
                "non-finite observation ({}, {})",
                bad.x, bad.y
            )));
        }
        Ok(Self { observations })
    }

    /// Builds a sample from parallel slices.
    pub fn from_xy(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(RdError::InvalidInput(format!(
                "x has {} values but y has {}",
                x.len(),
                y.len()
            )));
        }
        Self::new(
            x.iter()
                .zip(y)
                .map(|(&x, &y)| Observation { x, y })
                .collect(),
        )
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn n(&self) -> usize {
        self.observations.len()
    }

    pub fn xs(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.x).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.y).collect()
    }

    /// Keeps the rows with `|x| <= h`; `h = +inf` keeps everything.
    pub fn window(&self, h: f64) -> Result<Sample> {
        if h.is_nan() || h <= 0.0 {
            return Err(RdError::InvalidInput(format!(
                "bandwidth must be positive, got {h}"
            )));
        }
        let kept: Vec<Observation> = self
            .observations
            .iter()
            .filter(|o| o.x.abs() <= h)
            .copied()
            .collect();
        if kept.is_empty() {
            return Err(RdError::EmptyWindow { bandwidth: h });
        }
        Ok(Sample { observations: kept })
    }

    /// Groups observations by exact value of the running variable.
    pub fn group(&self) -> GroupedSample {
        GroupedSample::from_sample(self)
    }

    /// Distinct support points in ascending order.
    pub fn support(&self) -> Vec<f64> {
        let mut xs = self.xs();
        xs.sort_by(f64::total_cmp);
        xs.dedup_by(|a, b| a == b);
        xs
    }
}

/// Per-support-point summary of a sample: the "cluster" view.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupedSample {
    /// Strictly ascending distinct values of `x`.
    pub support: Vec<f64>,
    pub counts: Vec<usize>,
    pub means: Vec<f64>,
    /// Unbiased within-group variances, zero when a group has a single row.
    pub variances: Vec<f64>,
    /// Number of support points below the cutoff.
    pub g_minus: usize,
    /// Number of support points at or above the cutoff.
    pub g_plus: usize,
    /// Row indices (into the source sample) belonging to each support point.
    #[serde(skip)]
    pub members: Vec<Vec<usize>>,
}

impl GroupedSample {
    pub fn from_sample(sample: &Sample) -> Self {
        let obs = sample.observations();
        let mut order: Vec<usize> = (0..obs.len()).collect();
        // stable sort keeps original row order within a group
        order.sort_by(|&a, &b| obs[a].x.total_cmp(&obs[b].x));

        let mut support = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for idx in order {
            let x = obs[idx].x;
            match support.last() {
                Some(&last) if last == x => members.last_mut().unwrap().push(idx),
                _ => {
                    support.push(x);
                    members.push(vec![idx]);
                }
            }
        }

        let mut counts = Vec::with_capacity(support.len());
        let mut means = Vec::with_capacity(support.len());
        let mut variances = Vec::with_capacity(support.len());
        for rows in &members {
            let n = rows.len();
            let mean = rows.iter().map(|&i| obs[i].y).sum::<f64>() / n as f64;
            let var = if n > 1 {
                rows.iter().map(|&i| (obs[i].y - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            counts.push(n);
            means.push(mean);
            variances.push(var);
        }
        let g_minus = support.iter().filter(|&&x| x < 0.0).count();
        let g_plus = support.len() - g_minus;

        Self {
            support,
            counts,
            means,
            variances,
            g_minus,
            g_plus,
            members,
        }
    }

    /// Number of support points `G`.
    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Index of `x` in the support, if present.
    pub fn index_of(&self, x: f64) -> Option<usize> {
        self.support
            .binary_search_by(|probe| probe.total_cmp(&x))
            .ok()
            .or_else(|| self.support.iter().position(|&s| s == x))
    }

    /// Support points with at most one observation.
    pub fn singletons(&self) -> Vec<f64> {
        self.support
            .iter()
            .zip(&self.counts)
            .filter(|(_, &n)| n <= 1)
            .map(|(&x, _)| x)
            .collect()
    }
}

/// Reads a CSV with a header row and returns `(x - cutoff, y)` pairs.
///
/// Row numbers in errors count data rows from 1 (the header is not counted).
pub fn load_csv(path: &Path, x_column: &str, y_column: &str, cutoff: f64) -> Result<Sample> {
    if !cutoff.is_finite() {
        return Err(RdError::InvalidInput(format!("cutoff must be finite, got {cutoff}")));
    }
    let file = std::fs::File::open(path).map_err(|source| RdError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let csv_err = |source| RdError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let headers = reader.headers().map_err(csv_err)?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| RdError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let xi = find(x_column)?;
    let yi = find(y_column)?;

    let mut observations = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(csv_err)?;
        let x = parse_cell(record.get(xi), row, x_column)?;
        let y = parse_cell(record.get(yi), row, y_column)?;
        observations.push(Observation { x: x - cutoff, y });
    }
    if observations.is_empty() {
        return Err(RdError::InvalidInput(format!("{} has no data rows", path.display())));
    }
    Sample::new(observations)
}

fn parse_cell(cell: Option<&str>, row: usize, column: &str) -> Result<f64> {
    let bad = |reason: String| RdError::BadCell {
        row,
        column: column.to_string(),
        reason,
    };
    let text = cell.ok_or_else(|| bad("missing cell".into()))?;
    if text.is_empty() {
        return Err(bad("blank cell".into()));
    }
    let value: f64 = text
        .parse()
        .map_err(|_| bad(format!("cannot parse `{text}` as a number")))?;
    if !value.is_finite() {
        return Err(bad(format!("non-finite value `{text}`")));
    }
    Ok(value)
}
