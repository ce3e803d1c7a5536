//! Column centering and PPCA dimension reduction of raw T x V scans.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use rayon::prelude::*;

use crate::datamodel::LongitudinalDataset;
use crate::error::{LicaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningResult {
    /// q x V reduced data.
    pub y: DMatrix<f64>,
    /// Mean of the discarded scatter eigenvalues.
    pub sigma_tilde_sq: f64,
    /// T x q leading eigenvectors.
    pub u_q: DMatrix<f64>,
    /// Leading eigenvalues, descending.
    pub lambda_q: Vec<f64>,
}

/// How raw blocks are brought down to q rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMethod {
    /// PPCA whitening, (Lambda_q - s^2 I)^{-1/2} U_q' Y.
    Whiten,
    /// Plain projection U_q' Y; keeps the source scale.
    Project,
}

impl FromStr for ReduceMethod {
    type Err = LicaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whiten" => Ok(Self::Whiten),
            "project" => Ok(Self::Project),
            _ => Err(LicaError::Config(format!("unknown reduction method '{s}' (expected whiten|project)"))),
        }
    }
}

impl fmt::Display for ReduceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Whiten => "whiten",
            Self::Project => "project",
        })
    }
}

/// Subtracts each column's mean.
pub fn center_columns(raw: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = raw.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

/// Eigenvalues in descending order (ties keep their original index order)
/// and eigenvectors whose largest-magnitude entry is positive.
pub fn sorted_eigen(sym: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = sym.nrows();
    let eig = SymmetricEigen::new(sym.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (c, &k) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(k);
        let mut pivot = 0;
        for r in 1..n {
            if col[r].abs() > col[pivot].abs() {
                pivot = r;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        vectors.set_column(c, &(col * sign));
    }
    (values, vectors)
}

/// PPCA quantities of a T x T scatter matrix: leading eigenpairs and the
/// mean of the trailing T - q eigenvalues.
pub fn ppca_from_scatter(scatter: &DMatrix<f64>, q: usize) -> Result<(Vec<f64>, DMatrix<f64>, f64)> {
    let t = scatter.nrows();
    if q == 0 || q >= t {
        return Err(LicaError::Argument(format!("need 1 <= q < T, got q = {q}, T = {t}")));
    }
    let (values, vectors) = sorted_eigen(scatter);
    let tail = &values[q..];
    let sigma = (tail.iter().sum::<f64>() / tail.len() as f64).max(0.0);
    let lambda_q = values[..q].to_vec();
    let last = lambda_q[q - 1];
    if !(last > sigma) {
        return Err(LicaError::Rank(format!(
            "eigenvalue {q} ({last:.6e}) does not exceed the residual variance {sigma:.6e}; data have fewer than {q} signal dimensions"
        )));
    }
    Ok((lambda_q, vectors.columns(0, q).into_owned(), sigma))
}

fn checked_scatter(raw: &DMatrix<f64>, q: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (t, v) = raw.shape();
    if q == 0 || q >= t {
        return Err(LicaError::Argument(format!("need 1 <= q < T, got q = {q}, T = {t}")));
    }
    if t > v {
        return Err(LicaError::Argument(format!("need T <= V, got T = {t}, V = {v}")));
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(LicaError::Argument("raw data contain non-finite values".into()));
    }
    let centered = center_columns(raw);
    let scatter = &centered * centered.transpose() / v as f64;
    Ok((centered, scatter))
}

/// Centers the columns of a T x V block and whitens it down to q rows.
pub fn ppca_whiten(raw: &DMatrix<f64>, q: usize) -> Result<WhiteningResult> {
    let (centered, scatter) = checked_scatter(raw, q)?;
    let (lambda_q, u_q, sigma) = ppca_from_scatter(&scatter, q)?;
    let scale = DVector::from_iterator(q, lambda_q.iter().map(|l| 1.0 / (l - sigma).sqrt()));
    let mut y = u_q.transpose() * centered;
    for (mut row, s) in y.row_iter_mut().zip(scale.iter()) {
        row *= *s;
    }
    Ok(WhiteningResult { y, sigma_tilde_sq: sigma, u_q, lambda_q })
}

/// Centers the columns and projects onto the leading q eigenvectors
/// without rescaling.
pub fn pca_reduce(raw: &DMatrix<f64>, q: usize) -> Result<WhiteningResult> {
    let (centered, scatter) = checked_scatter(raw, q)?;
    let (lambda_q, u_q, sigma) = ppca_from_scatter(&scatter, q)?;
    let y = u_q.transpose() * centered;
    Ok(WhiteningResult { y, sigma_tilde_sq: sigma, u_q, lambda_q })
}

pub fn reduce(raw: &DMatrix<f64>, q: usize, method: ReduceMethod) -> Result<WhiteningResult> {
    match method {
        ReduceMethod::Whiten => ppca_whiten(raw, q),
        ReduceMethod::Project => pca_reduce(raw, q),
    }
}

/// Reduces every block of a raw dataset to q rows. Returns the reduced
/// dataset and, per block, the T x q eigenvector basis used.
pub fn reduce_dataset(
    raw: &LongitudinalDataset,
    q: usize,
    method: ReduceMethod,
) -> Result<(LongitudinalDataset, Vec<DMatrix<f64>>)> {
    let results: Vec<WhiteningResult> = raw
        .blocks
        .par_iter()
        .enumerate()
        .map(|(ij, b)| {
            reduce(b, q, method).map_err(|e| {
                let (i, j) = (ij / raw.n_visits, ij % raw.n_visits);
                match e {
                    LicaError::Rank(m) => LicaError::Rank(format!("block ({i}, {j}): {m}")),
                    LicaError::Argument(m) => LicaError::Argument(format!("block ({i}, {j}): {m}")),
                    other => other,
                }
            })
        })
        .collect::<Result<_>>()?;
    let mut blocks = Vec::with_capacity(results.len());
    let mut bases = Vec::with_capacity(results.len());
    for r in results {
        blocks.push(r.y);
        bases.push(r.u_q);
    }
    let t = if raw.t_original > 0 { raw.t_original } else { raw.q() };
    let mut ds = LongitudinalDataset::new(raw.n_subjects, raw.n_visits, t, blocks, raw.covariates.clone())?;
    ds.voxel_coords = raw.voxel_coords.clone();
    Ok((ds, bases))
}

/// Second-moment matrix Y Y' / V of the rows of Y.
pub fn row_covariance(y: &DMatrix<f64>) -> DMatrix<f64> {
    y * y.transpose() / y.ncols() as f64
}
