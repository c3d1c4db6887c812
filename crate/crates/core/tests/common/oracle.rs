//! Literal-formula variance estimators: an exact rational inverse of `X'X`,
//! the hat matrix, and `(I - H_gg)^{-1/2}` from a Jacobi eigendecomposition.
//! Shared by the core oracle tests and the acceptance suite.

// index loops mirror the textbook formulas
#![allow(clippy::needless_range_loop)]

use num::{BigRational, One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdinfer_core::variance::{self, Clusters, Regression};
use rdinfer_core::{fit, Design, FitResult, GroupedSample, Sample};

type Mat = Vec<Vec<f64>>;
type Q = BigRational;
type QMat = Vec<Vec<Q>>;

fn q(v: f64) -> Q {
    Q::from_float(v).unwrap()
}

fn f(v: &Q) -> f64 {
    v.to_f64().unwrap()
}

fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

fn qzeros(r: usize, c: usize) -> QMat {
    vec![vec![Q::zero(); c]; r]
}

fn transpose(a: &QMat) -> QMat {
    let mut t = qzeros(a[0].len(), a.len());
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            t[j][i] = v.clone();
        }
    }
    t
}

fn matmul(a: &QMat, b: &QMat) -> QMat {
    let mut c = qzeros(a.len(), b[0].len());
    for i in 0..a.len() {
        for k in 0..b.len() {
            if a[i][k].is_zero() {
                continue;
            }
            for j in 0..b[0].len() {
                c[i][j] += &a[i][k] * &b[k][j];
            }
        }
    }
    c
}

fn matvec(a: &QMat, v: &[Q]) -> Vec<Q> {
    a.iter().map(|row| dot(row, v)).collect()
}

fn dot(a: &[Q], b: &[Q]) -> Q {
    a.iter().zip(b).fold(Q::zero(), |acc, (x, y)| acc + x * y)
}

fn fdot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn fmatvec(a: &Mat, v: &[f64]) -> Vec<f64> {
    a.iter().map(|row| fdot(row, v)).collect()
}

/// Exact Gauss-Jordan.
fn invert(a: &QMat) -> QMat {
    let n = a.len();
    let mut m: QMat = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { Q::one() } else { Q::zero() }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).find(|&i| !m[i][col].is_zero()).expect("singular");
        m.swap(col, pivot);
        let p = m[col][col].clone();
        for v in m[col].iter_mut() {
            *v /= &p;
        }
        for row in 0..n {
            if row != col && !m[row][col].is_zero() {
                let factor = m[row][col].clone();
                for j in 0..2 * n {
                    let delta = &factor * &m[col][j];
                    m[row][j] -= delta;
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Cyclic Jacobi: eigenvalues and column eigenvectors of a symmetric matrix.
fn jacobi(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.len();
    let mut a = a.clone();
    let mut v = zeros(n, n);
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// `(I - H_gg)^{-1/2}` with eigenvalues under 1e-10 mapped to zero.
fn inverse_sqrt_annihilator(block: &Mat) -> Mat {
    let n = block.len();
    let mut m = zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[i][j] = if i == j { 1.0 } else { 0.0 } - block[i][j];
        }
    }
    let (vals, vecs) = jacobi(&m);
    let mut out = zeros(n, n);
    for (k, &lam) in vals.iter().enumerate() {
        if lam < 1e-10 {
            continue;
        }
        let f = 1.0 / lam.sqrt();
        for i in 0..n {
            for j in 0..n {
                out[i][j] += f * vecs[i][k] * vecs[j][k];
            }
        }
    }
    out
}

pub struct Literal {
    pub ehw: f64,
    pub crv: f64,
    pub crv_factor: f64,
    pub crv2: f64,
    pub nn: f64,
    /// `None` when the fit absorbs every cluster.
    pub bm: Option<f64>,
    pub tau: f64,
}

/// Columns `1, x, .., x^p, T, T x, .., T x^p`; the jump is column `p + 1`.
/// Everything up to the hat matrix is exact rational arithmetic.
pub fn literal(x: &[f64], y: &[f64], p: usize) -> Literal {
    let n = x.len();
    let k = 2 * (p + 1);
    let jump = p + 1;
    let design: QMat = x
        .iter()
        .map(|&xi| {
            let t = if xi >= 0.0 { Q::one() } else { Q::zero() };
            let xq = q(xi);
            let powers: Vec<Q> = (0..=p).map(|j| num::pow(xq.clone(), j)).collect();
            let mut row = powers.clone();
            row.extend(powers.iter().map(|v| &t * v));
            row
        })
        .collect();
    let yq: Vec<Q> = y.iter().map(|&v| q(v)).collect();
    let xt = transpose(&design);
    let xtx_inv = invert(&matmul(&xt, &design));
    let beta = matvec(&xtx_inv, &matvec(&xt, &yq));
    let resid: Vec<Q> = (0..n).map(|i| &yq[i] - dot(&design[i], &beta)).collect();
    let a: Vec<Q> = xtx_inv.iter().map(|row| row[jump].clone()).collect();
    let w: Vec<Q> = design.iter().map(|row| dot(row, &a)).collect();
    let nq = Q::from_integer((n as i64).into());
    let nf = n as f64;

    let ehw = (0..n).fold(Q::zero(), |acc, i| acc + &w[i] * &w[i] * &resid[i] * &resid[i]) * &nq;

    let mut support: Vec<f64> = x.to_vec();
    support.sort_by(f64::total_cmp);
    support.dedup();
    let groups: Vec<Vec<usize>> = support
        .iter()
        .map(|&s| (0..n).filter(|&i| x[i] == s).collect())
        .collect();
    let g = groups.len();

    let crv = groups.iter().fold(Q::zero(), |acc, rows| {
        let sum = rows.iter().fold(Q::zero(), |s, &i| s + &w[i] * &resid[i]);
        acc + &sum * &sum
    }) * &nq;
    let factor = g as f64 / (g as f64 - 1.0) * (nf - 1.0) / (nf - k as f64);

    let nn = groups.iter().fold(Q::zero(), |acc, rows| {
        let m = Q::from_integer((rows.len() as i64).into());
        let mean = rows.iter().fold(Q::zero(), |s, &i| s + &yq[i]) / &m;
        if rows.len() < 2 {
            return acc;
        }
        let ss = rows.iter().fold(Q::zero(), |s, &i| {
            let d = &yq[i] - &mean;
            s + &d * &d
        });
        let s2 = ss / (m - Q::one());
        let ww = rows.iter().fold(Q::zero(), |s, &i| s + &w[i] * &w[i]);
        acc + ww * s2
    }) * &nq;

    let hat_q = matmul(&matmul(&design, &xtx_inv), &xt);
    let hat: Mat = hat_q.iter().map(|r| r.iter().map(f).collect()).collect();
    let wf: Vec<f64> = w.iter().map(f).collect();
    let rf: Vec<f64> = resid.iter().map(f).collect();
    let mut crv2 = 0.0;
    // columns of the BM matrix: (I - H)_{., g} A_g w_g
    let mut bm_cols: Vec<Vec<f64>> = Vec::new();
    for rows in &groups {
        let block: Mat = rows.iter().map(|&i| rows.iter().map(|&j| hat[i][j]).collect()).collect();
        let adj = inverse_sqrt_annihilator(&block);
        let wg: Vec<f64> = rows.iter().map(|&i| wf[i]).collect();
        let ug: Vec<f64> = rows.iter().map(|&i| rf[i]).collect();
        let ell = fmatvec(&adj, &wg);
        crv2 += fdot(&ell, &ug).powi(2);
        let col: Vec<f64> = (0..n)
            .map(|i| {
                rows.iter()
                    .enumerate()
                    .map(|(r, &j)| (if i == j { 1.0 } else { 0.0 } - hat[i][j]) * ell[r])
                    .sum()
            })
            .collect();
        bm_cols.push(col);
    }
    let gram: Mat = bm_cols.iter().map(|a| bm_cols.iter().map(|b| fdot(a, b)).collect()).collect();
    let trace: f64 = (0..g).map(|i| gram[i][i]).sum();
    let trace_sq: f64 = gram.iter().flatten().map(|v| v * v).sum();

    Literal {
        ehw: f(&ehw),
        crv: f(&crv),
        crv_factor: f(&crv) * factor,
        crv2: nf * crv2,
        nn: f(&nn),
        bm: (trace > 1e-10 * wf.iter().map(|v| v * v).sum::<f64>()).then(|| trace * trace / trace_sq),
        tau: f(&beta[jump]),
    }
}

/// Random design with `min_per_side` or more support points on each side.
pub fn instance(rng: &mut ChaCha8Rng, min_per_side: usize) -> (Vec<f64>, Vec<f64>, usize) {
    loop {
        let p = rng.random_range(0..=2usize);
        let per_side = min_per_side.max(p + 1);
        let g_minus = rng.random_range(per_side..=per_side + 3);
        let g_plus = rng.random_range(per_side..=per_side + 3);
        let mut x = Vec::new();
        for (count, sign) in [(g_minus, -1.0), (g_plus, 1.0)] {
            // distinct points on a grid so ties are exact
            let mut grid: Vec<u32> = (1..=20).collect();
            for _ in 0..count {
                let pick = grid.swap_remove(rng.random_range(0..grid.len()));
                let xv = sign * pick as f64 / 20.0;
                let reps = rng.random_range(1..=3usize);
                x.extend(std::iter::repeat_n(xv, reps));
            }
        }
        let k = 2 * (p + 1);
        if x.len() > 25 || x.len() < k + 2 {
            continue;
        }
        let y: Vec<f64> = x
            .iter()
            .map(|&xi| 0.5 * xi + if xi >= 0.0 { 1.0 } else { 0.0 } + rng.random_range(-1.0..1.0))
            .collect();
        return (x, y, p);
    }
}

fn ours(x: &[f64], y: &[f64], p: usize) -> (FitResult, GroupedSample) {
    let f = fit(&Sample::from_xy(x, y).unwrap(), &Design::new(p, f64::INFINITY).unwrap()).unwrap();
    let g = f.grouped();
    (f, g)
}

fn close(label: &str, got: f64, want: f64, scale: f64, tol: f64) -> Result<(), String> {
    let err = (got - want).abs() / scale.max(f64::MIN_POSITIVE);
    if err <= tol {
        Ok(())
    } else {
        Err(format!("{label}: got {got}, literal {want}, relative error {err:e}"))
    }
}

fn err<E: std::fmt::Display>(label: &str) -> impl Fn(E) -> String + '_ {
    move |e| format!("{label}: {e}")
}

/// Compares every estimator on `cases` random designs. Sides may be
/// saturated unless `min_per_side` exceeds `p + 1`.
pub fn check_random(seed: u64, cases: usize, min_per_side: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let (x, y, p) = instance(&mut rng, min_per_side);
        let lit = literal(&x, &y, p);
        let (f, g) = ours(&x, &y, p);
        let tag = |m: &str| format!("case {case} (p={p}, N={}) {m}", x.len());
        close(&tag("tau"), f.tau, lit.tau, lit.tau.abs().max(1.0), 1e-10)?;
        close(&tag("EHW"), variance::ehw(&f).sigma2, lit.ehw, lit.ehw, 1e-10)?;
        let nn = variance::nn(&f, &g).map_err(err(&tag("NN")))?.sigma2;
        close(&tag("NN"), nn, lit.nn, lit.nn.max(lit.ehw), 1e-10)?;
        // saturated sides make cluster sums vanish; scale by EHW then
        let floor = if min_per_side > p + 1 { 0.0 } else { 1e-6 * lit.ehw };
        let crv = variance::crv(&f, &g, false).map_err(err(&tag("CRV")))?.sigma2;
        close(&tag("CRV"), crv, lit.crv, lit.crv.max(floor), 1e-10)?;
        let crv_f = variance::crv(&f, &g, true).map_err(err(&tag("CRV factor")))?.sigma2;
        close(&tag("CRV factor"), crv_f, lit.crv_factor, lit.crv_factor.max(floor), 1e-10)?;
        let crv2 = variance::crv2(&f, &g).map_err(err(&tag("CRV2")))?.sigma2;
        close(&tag("CRV2"), crv2, lit.crv2, lit.crv2.max(floor), 1e-10)?;
        match lit.bm {
            Some(bm) => {
                let dof = variance::bm_dof(&f, &g).map_err(err(&tag("BM dof")))?;
                close(&tag("BM dof"), dof, bm, bm, 1e-8)?;
            }
            None => {
                if variance::bm_dof(&f, &g).is_ok() {
                    return Err(tag("BM dof should be undefined"));
                }
            }
        }
    }
    Ok(())
}

/// `bm_dof = G - 1` when regressing on a constant with equal cluster sizes.
pub fn check_bm_balanced(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for clusters in 2..=12usize {
        for size in 1..=4usize {
            let n = clusters * size;
            let design = nalgebra::DMatrix::from_element(n, 1, 1.0);
            let xtx_inverse = nalgebra::DMatrix::from_element(1, 1, 1.0 / n as f64);
            let residuals = nalgebra::DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let reg = Regression {
                design: &design,
                residuals: &residuals,
                xtx_inverse: &xtx_inverse,
            };
            let labels: Vec<usize> = (0..n).map(|i| i / size).collect();
            let label = format!("G={clusters} m={size}");
            let dof = variance::cluster::bm_dof(&reg, &Clusters::from_labels(&labels)).map_err(err(&label))?;
            let want = (clusters - 1) as f64;
            close(&label, dof, want, want, 1e-8)?;
        }
    }
    Ok(())
}
