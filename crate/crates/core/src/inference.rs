//! Voxel-wise tests of covariate effects through the stacked
//! multivariate-linear-model form of the second level.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::datamodel::{Contrast, ModelParams};
use crate::em::PosteriorMoments;
use crate::error::{LicaError, Result};

/// Stacked design X_i* = [X_0, X_i] for one subject, qK x (qK + qKp).
pub fn build_design(x: &[f64], n_visits: usize, q: usize) -> DMatrix<f64> {
    let p = x.len();
    let k = n_visits;
    let mut out = DMatrix::zeros(q * k, Contrast::stacked_dim(q, k, p));
    for j in 0..k {
        for l in 0..q {
            let r = j * q + l;
            out[(r, l)] = 1.0;
            if j > 0 {
                out[(r, Contrast::visit_index(q, j, l))] = 1.0;
            }
            for (c, xc) in x.iter().enumerate() {
                out[(r, Contrast::beta_index(q, k, p, j, c, l))] = *xc;
            }
        }
    }
    out
}

/// Human-readable name of a stacked-parameter slot.
pub fn slot_name(idx: usize, q: usize, n_visits: usize, p: usize) -> String {
    let qk = q * n_visits;
    if idx < q {
        format!("mu[ic {idx}]")
    } else if idx < qk {
        format!("alpha[visit {}, ic {}]", idx / q, idx % q)
    } else {
        let r = idx - qk;
        let j = r / (q * p);
        let c = (r % (q * p)) / q;
        format!("beta[visit {j}, covariate {c}, ic {}]", r % q)
    }
}

/// (sum_i X_i*' W^{-1} X_i*)^{-1}.
pub fn estimate_variance(w: &DMatrix<f64>, designs: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let winv = w
        .clone()
        .cholesky()
        .ok_or_else(|| LicaError::Numeric("residual covariance W is not positive definite".into()))?
        .inverse();
    let dim = designs.first().map_or(0, |x| x.ncols());
    let mut normal = DMatrix::zeros(dim, dim);
    for x in designs {
        normal += x.transpose() * &winv * x;
    }
    invert_normal(normal, None)
}

fn invert_normal(normal: DMatrix<f64>, names: Option<&dyn Fn(usize) -> String>) -> Result<DMatrix<f64>> {
    let dim = normal.nrows();
    let eig = SymmetricEigen::new(normal.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut null = Vec::new();
    for k in 0..dim {
        if eig.eigenvalues[k] <= 1e-12 * max.max(f64::MIN_POSITIVE) {
            let v = eig.eigenvectors.column(k);
            let involved: Vec<String> = (0..dim)
                .filter(|&c| v[c].abs() > 1e-6)
                .map(|c| names.map_or_else(|| format!("slot {c}"), |f| f(c)))
                .collect();
            null.push(format!("[{}]", involved.join(", ")));
        }
    }
    if !null.is_empty() {
        return Err(LicaError::Rank(format!("normal matrix is singular; null directions: {}", null.join("; "))));
    }
    let mut inv = normal
        .cholesky()
        .ok_or_else(|| LicaError::Rank("normal matrix is not positive definite".into()))?
        .inverse();
    inv = (&inv + inv.transpose()) * 0.5;
    Ok(inv)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid normal")
}

/// z = l'C / sqrt(l'Var l) with a two-sided standard-normal p-value.
pub fn test_contrast(l: &[f64], c_hat: &DVector<f64>, var: &DMatrix<f64>) -> Result<(f64, f64)> {
    if l.len() != c_hat.len() || var.shape() != (l.len(), l.len()) {
        return Err(LicaError::Argument(format!(
            "contrast has {} coefficients but the stacked parameter has {}",
            l.len(),
            c_hat.len()
        )));
    }
    let lv = DVector::from_column_slice(l);
    let denom = lv.dot(&(var * &lv));
    if !(denom > 0.0) {
        return Err(LicaError::Numeric(format!("degenerate contrast: l'Var l = {denom:e}")));
    }
    let z = lv.dot(c_hat) / denom.sqrt();
    let p = (2.0 * std_normal().cdf(-z.abs())).min(1.0);
    Ok((z, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Correction {
    None,
    Bonferroni,
    BenjaminiHochberg,
}

impl FromStr for Correction {
    type Err = LicaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "bonferroni" => Ok(Self::Bonferroni),
            "bh" | "fdr" => Ok(Self::BenjaminiHochberg),
            _ => Err(LicaError::Config(format!("unknown correction '{s}' (none|bonferroni|bh)"))),
        }
    }
}

impl fmt::Display for Correction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Bonferroni => "bonferroni",
            Self::BenjaminiHochberg => "bh",
        })
    }
}

/// Adjusted p-values and the rejection mask `adjusted <= alpha`.
pub fn adjust_pvalues(p: &[f64], method: Correction, alpha: f64) -> (Vec<f64>, Vec<bool>) {
    let m = p.len();
    let adj: Vec<f64> = match method {
        Correction::None => p.to_vec(),
        Correction::Bonferroni => p.iter().map(|x| (x * m as f64).min(1.0)).collect(),
        Correction::BenjaminiHochberg => {
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
            let mut out = vec![0.0; m];
            let mut running = 1.0f64;
            for rank in (0..m).rev() {
                let idx = order[rank];
                running = running.min(p[idx] * m as f64 / (rank + 1) as f64);
                out[idx] = running.max(p[idx]).min(1.0);
            }
            out
        }
    };
    let mask = adj.iter().map(|&x| x <= alpha).collect();
    (adj, mask)
}

/// Which Sigma_z enters W(v).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaChoice {
    /// sum_k p(z_l = k | y) sigma^2_{l,k} per IC.
    Posterior,
    /// sigma^2 of the most probable state per IC.
    Map,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastResult {
    pub label: String,
    /// l'C*(v) per voxel.
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    pub p_adj: Vec<f64>,
    pub reject: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    /// C*(v) per voxel, as columns.
    pub estimates: DMatrix<f64>,
    pub variances: Vec<DMatrix<f64>>,
    pub contrasts: Vec<ContrastResult>,
    pub correction: Correction,
    pub alpha: f64,
}

/// Residual covariance W(v) = U(Sigma + D)U' + (sigma0^2 + tau^2) I_qK.
pub fn residual_covariance(theta: &ModelParams, sigma_z: &[f64]) -> DMatrix<f64> {
    let (q, k) = (theta.q(), theta.n_visits());
    let mut w = DMatrix::zeros(q * k, q * k);
    for a in 0..k {
        for b in 0..k {
            for l in 0..q {
                w[(a * q + l, b * q + l)] = sigma_z[l] + theta.d[l];
            }
        }
    }
    for d in 0..q * k {
        w[(d, d)] += theta.sigma0_sq + theta.tau_sq;
    }
    w
}

/// Sigma_z diagonal at voxel v.
pub fn voxel_sigma(theta: &ModelParams, moments: &PosteriorMoments, v: usize, choice: SigmaChoice) -> Vec<f64> {
    let mg = &moments.voxels[v].marginals;
    theta
        .mog
        .ics
        .iter()
        .enumerate()
        .map(|(l, ic)| match choice {
            SigmaChoice::Posterior => (0..mg.m).map(|k| mg.prob(l, k) * ic.variances[k]).sum(),
            SigmaChoice::Map => {
                let best = (0..mg.m).fold(0, |b, k| if mg.prob(l, k) > mg.prob(l, b) { k } else { b });
                ic.variances[best]
            }
        })
        .collect()
}

/// Stacked C*(v): [E[s_0(v)|y], alpha_2..alpha_K, vec(beta_1'), ..., vec(beta_K')].
pub fn stacked_estimate(theta: &ModelParams, moments: &PosteriorMoments, v: usize) -> DVector<f64> {
    let (q, k, p) = (theta.q(), theta.n_visits(), theta.n_covariates());
    let mut c = DVector::zeros(Contrast::stacked_dim(q, k, p));
    for l in 0..q {
        c[l] = moments.voxels[v].e_s0[l];
        for j in 1..k {
            c[Contrast::visit_index(q, j, l)] = theta.alpha[j][(l, v)];
        }
        for j in 0..k {
            for cc in 0..p {
                c[Contrast::beta_index(q, k, p, j, cc, l)] = theta.beta[j][(cc * q + l, v)];
            }
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceOptions {
    pub correction: Correction,
    pub alpha: f64,
    pub sigma: SigmaChoice,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { correction: Correction::None, alpha: 0.05, sigma: SigmaChoice::Posterior }
    }
}

/// Estimates, plug-in variances and contrast tests at every voxel.
pub fn infer(
    theta: &ModelParams,
    moments: &PosteriorMoments,
    covariates: &DMatrix<f64>,
    contrasts: &[Contrast],
    opts: InferenceOptions,
) -> Result<InferenceResult> {
    let (q, k, p) = (theta.q(), theta.n_visits(), theta.n_covariates());
    let dim = Contrast::stacked_dim(q, k, p);
    if covariates.ncols() != p || covariates.nrows() != theta.n_subjects() {
        return Err(LicaError::Argument("covariates do not match the fitted model".into()));
    }
    for c in contrasts {
        if c.coefficients.len() != dim {
            return Err(LicaError::Argument(format!(
                "contrast '{}' has {} coefficients; expected {dim} (q = {q}, K = {k}, p = {p})",
                c.label,
                c.coefficients.len()
            )));
        }
    }
    let designs: Vec<DMatrix<f64>> = (0..covariates.nrows())
        .map(|i| build_design(&covariates.row(i).iter().copied().collect::<Vec<_>>(), k, q))
        .collect();
    let names = |c: usize| slot_name(c, q, k, p);
    let nv = moments.voxels.len();
    let per: Vec<(DVector<f64>, DMatrix<f64>)> = (0..nv)
        .into_par_iter()
        .map(|v| {
            let w = residual_covariance(theta, &voxel_sigma(theta, moments, v, opts.sigma));
            let winv = w
                .cholesky()
                .ok_or_else(|| LicaError::Numeric(format!("voxel {v}: W is not positive definite")))?
                .inverse();
            let mut normal = DMatrix::zeros(dim, dim);
            for x in &designs {
                normal += x.transpose() * &winv * x;
            }
            let var = invert_normal(normal, Some(&names)).map_err(|e| match e {
                LicaError::Rank(m) => LicaError::Rank(format!("voxel {v}: {m}")),
                other => other,
            })?;
            Ok((stacked_estimate(theta, moments, v), var))
        })
        .collect::<Result<_>>()?;
    let mut estimates = DMatrix::zeros(dim, nv);
    let mut variances = Vec::with_capacity(nv);
    for (v, (c, var)) in per.into_iter().enumerate() {
        estimates.set_column(v, &c);
        variances.push(var);
    }
    let mut results = Vec::with_capacity(contrasts.len());
    for con in contrasts {
        let lv = DVector::from_column_slice(&con.coefficients);
        let mut out = ContrastResult {
            label: con.label.clone(),
            estimate: Vec::with_capacity(nv),
            se: Vec::with_capacity(nv),
            z: Vec::with_capacity(nv),
            p: Vec::with_capacity(nv),
            p_adj: Vec::new(),
            reject: Vec::new(),
        };
        for v in 0..nv {
            let c = estimates.column(v).into_owned();
            let (z, pv) = test_contrast(&con.coefficients, &c, &variances[v])
                .map_err(|e| LicaError::Numeric(format!("contrast '{}' at voxel {v}: {e}", con.label)))?;
            out.estimate.push(lv.dot(&c));
            out.se.push(lv.dot(&(&variances[v] * &lv)).sqrt());
            out.z.push(z);
            out.p.push(pv);
        }
        let (adj, mask) = adjust_pvalues(&out.p, opts.correction, opts.alpha);
        out.p_adj = adj;
        out.reject = mask;
        results.push(out);
    }
    Ok(InferenceResult { estimates, variances, contrasts: results, correction: opts.correction, alpha: opts.alpha })
}

/// One contrast per line: a label followed by coefficients separated by
/// commas or whitespace; `#` starts a comment.
pub fn parse_contrasts(text: &str) -> Result<Vec<Contrast>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(|c: char| c == ',' || c.is_whitespace() || c == ':').filter(|s| !s.is_empty());
        let label = parts.next().unwrap_or_default().to_string();
        let coefs = parts
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| LicaError::Format(format!("contrast line {}: {e}", n + 1)))?;
        if coefs.is_empty() {
            return Err(LicaError::Format(format!("contrast line {}: no coefficients after label '{label}'", n + 1)));
        }
        let c = Contrast::new(label, coefs).map_err(|e| LicaError::Format(format!("contrast line {}: {e}", n + 1)))?;
        out.push(c);
    }
    Ok(out)
}

pub fn load_contrasts(path: impl AsRef<Path>) -> Result<Vec<Contrast>> {
    parse_contrasts(&std::fs::read_to_string(path)?)
}

/// Long-format CSV: contrast, voxel (plus coordinates when known),
/// estimate, se, z, p, p_adj, reject.
pub fn write_inference_csv<W: Write>(out: W, res: &InferenceResult, coords: Option<&[[i64; 3]]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| LicaError::Io(std::io::Error::other(e));
    w.write_record(["contrast", "voxel", "x", "y", "z_coord", "estimate", "se", "z", "p", "p_adj", "reject"]).map_err(io)?;
    for c in &res.contrasts {
        for v in 0..c.z.len() {
            let (x, y, zc) = coords.map_or((String::new(), String::new(), String::new()), |cs| {
                (cs[v][0].to_string(), cs[v][1].to_string(), cs[v][2].to_string())
            });
            w.write_record([
                c.label.clone(),
                v.to_string(),
                x,
                y,
                zc,
                format!("{:.17e}", c.estimate[v]),
                format!("{:.17e}", c.se[v]),
                format!("{:.17e}", c.z[v]),
                format!("{:.17e}", c.p[v]),
                format!("{:.17e}", c.p_adj[v]),
                u8::from(c.reject[v]).to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}
