//! Sandwich variance forms for a generic linear regression with clusters.
//!
//! Everything here is expressed for the first coefficient. With
//! `a = (M'M)^{-1} e1` and `w = M a`, the estimators reduce to
//!
//! * EHW: `sum_i (w_i u_i)^2`
//! * CRV: `sum_g (sum_{i in g} w_i u_i)^2`
//! * CRV2: `sum_g (w_g' A_g u_g)^2`
//!
//! where `A_g` is the pseudo-inverse symmetric square root of
//! `I - M_g (M'M)^{-1} M_g'`. `A_g` is never formed: `M_g (M'M)^{-1} M_g'`
//! has rank at most `k`, so its nonzero spectrum is read off the `k x k`
//! matrix `Q_g' Q_g`, where `M L = Q` has orthonormal columns and
//! `L L' = (M'M)^{-1}`, and `A_g` acts as the identity on the orthogonal
//! complement. Working with `Q` keeps `1 - lambda` accurate to roundoff even
//! when `M'M` is badly conditioned.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{RdError, Result};

/// Eigenvalues of `I - H_gg` below this value are treated as zero.
pub const ANNIHILATOR_TOLERANCE: f64 = 1e-10;

/// Eigenvalues of `Q_g' Q_g` below this are null directions of `H_gg`.
const LEVERAGE_NULL: f64 = 1e-13;

/// Borrowed view of a fitted regression.
#[derive(Debug, Clone, Copy)]
pub struct Regression<'a> {
    pub design: &'a DMatrix<f64>,
    pub residuals: &'a DVector<f64>,
    pub xtx_inverse: &'a DMatrix<f64>,
}

impl<'a> Regression<'a> {
    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn k(&self) -> usize {
        self.design.ncols()
    }

    /// `a = (M'M)^{-1} e1`.
    pub fn contrast(&self) -> DVector<f64> {
        self.xtx_inverse.column(0).into_owned()
    }

    /// `w_i = M_i' a`.
    pub fn weights(&self) -> DVector<f64> {
        self.design * self.contrast()
    }
}

/// Row indices of each cluster, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Clusters {
    pub members: Vec<Vec<usize>>,
}

impl Clusters {
    pub fn new(members: Vec<Vec<usize>>) -> Self {
        Self { members }
    }

    /// One cluster per distinct label, ordered by first appearance.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut index: Vec<Option<usize>> = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (row, &label) in labels.iter().enumerate() {
            if label >= index.len() {
                index.resize(label + 1, None);
            }
            let slot = *index[label].get_or_insert_with(|| {
                members.push(Vec::new());
                members.len() - 1
            });
            members[slot].push(row);
        }
        Self { members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub fn ehw_form(reg: &Regression<'_>) -> f64 {
    let w = reg.weights();
    w.iter()
        .zip(reg.residuals.iter())
        .map(|(w, u)| (w * u).powi(2))
        .sum()
}

pub fn crv_form(reg: &Regression<'_>, clusters: &Clusters) -> f64 {
    let w = reg.weights();
    clusters
        .members
        .iter()
        .map(|rows| {
            let s: f64 = rows.iter().map(|&i| w[i] * reg.residuals[i]).sum();
            s * s
        })
        .sum()
}

/// Spectral data of `H_gg = Q_g Q_g'` for one cluster, in `Q` coordinates.
struct ClusterSpectrum {
    /// `Q_g' Q_g`.
    inner: DMatrix<f64>,
    /// Retained eigenvectors `v_j` of `Q_g' Q_g`.
    directions: Vec<DVector<f64>>,
    /// Matching eigenvalues `lambda_j`, each in `(0, 1]`.
    leverages: Vec<f64>,
    truncated: Vec<bool>,
}

impl ClusterSpectrum {
    fn new(rows: &[usize], basis: &Orthonormal) -> Self {
        let k = basis.q.ncols();
        let mut inner = DMatrix::zeros(k, k);
        for &i in rows {
            let q = basis.q.row(i);
            inner += q.transpose() * q;
        }
        let eig = SymmetricEigen::new(inner.clone());

        let mut directions = Vec::new();
        let mut leverages = Vec::new();
        let mut truncated = Vec::new();
        for j in 0..k {
            let lambda = eig.eigenvalues[j];
            if lambda <= LEVERAGE_NULL {
                continue;
            }
            directions.push(eig.eigenvectors.column(j).into_owned());
            leverages.push(lambda);
            truncated.push(1.0 - lambda < ANNIHILATOR_TOLERANCE);
        }
        Self {
            inner,
            directions,
            leverages,
            truncated,
        }
    }

    /// Coefficients `c_j` with `A_g = I + sum_j c_j (Q_g v_j)(Q_g v_j)'`.
    fn sqrt_coefficients(&self) -> impl Iterator<Item = f64> + '_ {
        self.leverages
            .iter()
            .zip(&self.truncated)
            .map(|(&lambda, &cut)| {
                if cut {
                    -1.0 / lambda
                } else {
                    // (1/sqrt(1-l) - 1)/l, written to stay accurate as l -> 0
                    let s = (1.0 - lambda).sqrt();
                    1.0 / (s * (1.0 + s))
                }
            })
    }

    /// Coefficients `e_j` with `A_g^2 = I + sum_j e_j (Q_g v_j)(Q_g v_j)'`.
    fn square_coefficients(&self) -> impl Iterator<Item = f64> + '_ {
        self.leverages
            .iter()
            .zip(&self.truncated)
            .map(|(&lambda, &cut)| if cut { -1.0 / lambda } else { 1.0 / (1.0 - lambda) })
    }

    fn any_truncated(&self) -> bool {
        self.truncated.iter().any(|&t| t)
    }
}

/// `Q = M L` with orthonormal columns and `L L' = (M'M)^{-1}`.
struct Orthonormal {
    q: DMatrix<f64>,
    /// `b = L' e1`, so that `w = M a = Q b`.
    contrast: DVector<f64>,
}

impl Orthonormal {
    /// Householder QR of the column-scaled design.
    fn new(design: &DMatrix<f64>) -> Result<Self> {
        let (n, k) = design.shape();
        if n < k {
            return Err(RdError::RankDeficient { ratio: 0.0 });
        }
        let scale: Vec<f64> = (0..k).map(|j| design.column(j).amax()).collect();
        if scale.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return Err(RdError::RankDeficient { ratio: 0.0 });
        }
        let mut scaled = design.clone();
        for (j, &s) in scale.iter().enumerate() {
            scaled.column_mut(j).scale_mut(1.0 / s);
        }
        let qr = scaled.qr();
        // L = D^{-1} R^{-1}, so L' e1 solves R' b = e1 / d_1
        let mut e1 = DVector::zeros(k);
        e1[0] = 1.0 / scale[0];
        let contrast = qr
            .r()
            .transpose()
            .solve_lower_triangular(&e1)
            .ok_or(RdError::RankDeficient { ratio: 0.0 })?;
        Ok(Self { q: qr.q(), contrast })
    }
}

/// CRV2 form and whether any eigenvalue of `I - H_gg` was truncated.
pub fn crv2_form(reg: &Regression<'_>, clusters: &Clusters) -> Result<(f64, bool)> {
    let basis = Orthonormal::new(reg.design)?;
    let b = &basis.contrast;
    let w = &basis.q * b;
    let k = reg.k();
    let mut total = 0.0;
    let mut truncated = false;
    for rows in &clusters.members {
        let spec = ClusterSpectrum::new(rows, &basis);
        truncated |= spec.any_truncated();
        let mut t = DVector::zeros(k);
        let mut base = 0.0;
        for &i in rows {
            let u = reg.residuals[i];
            t += basis.q.row(i).transpose() * u;
            base += w[i] * u;
        }
        let sb = &spec.inner * b;
        let correction: f64 = spec
            .directions
            .iter()
            .zip(spec.sqrt_coefficients())
            .map(|(d, c)| c * d.dot(&sb) * d.dot(&t))
            .sum();
        let value = base + correction;
        total += value * value;
    }
    Ok((total, truncated))
}

/// Bell-McCaffrey degrees of freedom for the CRV2 variance of the first
/// coefficient under homoskedastic independent errors.
pub fn bm_dof(reg: &Regression<'_>, clusters: &Clusters) -> Result<f64> {
    if clusters.len() < 2 {
        return Err(RdError::DegreesOfFreedom(format!(
            "need at least two clusters, got {}",
            clusters.len()
        )));
    }
    let basis = Orthonormal::new(reg.design)?;
    let b = &basis.contrast;
    let g = clusters.len();

    // l_g = A_g Q_g b; the residual-maker applied to it is c_g, and
    // c_g'c_h = [g == h] |l_g|^2 - u_g'u_h with u_g = Q_g' l_g.
    let mut norms = Vec::with_capacity(g);
    let mut projections: Vec<DVector<f64>> = Vec::with_capacity(g);
    let mut unadjusted = 0.0;
    for rows in &clusters.members {
        let spec = ClusterSpectrum::new(rows, &basis);
        let sb = &spec.inner * b;
        let mut norm = b.dot(&sb);
        unadjusted += norm;
        let mut u = sb.clone();
        for ((d, c), e) in spec
            .directions
            .iter()
            .zip(spec.sqrt_coefficients())
            .zip(spec.square_coefficients())
        {
            let proj = d.dot(&sb);
            norm += e * proj * proj;
            u += (&spec.inner * d) * (c * proj);
        }
        norms.push(norm);
        projections.push(u);
    }

    let mut gamma = DMatrix::zeros(g, g);
    for i in 0..g {
        for j in i..g {
            let mut v = -projections[i].dot(&projections[j]);
            if i == j {
                v += norms[i];
            }
            gamma[(i, j)] = v;
            gamma[(j, i)] = v;
        }
    }
    let trace: f64 = gamma.diagonal().sum();
    if trace <= ANNIHILATOR_TOLERANCE * unadjusted {
        return Err(RdError::DegreesOfFreedom(
            "the fit absorbs every cluster, so the variance has no residual information".into(),
        ));
    }
    let frob: f64 = gamma.iter().map(|v| v * v).sum();
    let dof = trace * trace / frob;
    if !dof.is_finite() || dof <= 0.0 {
        return Err(RdError::DegreesOfFreedom(format!(
            "moment ratio is {dof} (trace {trace}, sum of squares {frob})"
        )));
    }
    Ok(dof)
}
