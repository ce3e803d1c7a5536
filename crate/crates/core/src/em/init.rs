//! Starting values: temporal-concatenation PCA, symmetric ICA for the
//! population maps, Procrustes fits for A_ij, least squares for the fixed
//! effects, moment splits for the variances and 1-D k-means for the MoG.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{IcMixture, LongitudinalDataset, ModelParams, MogParams};
use crate::em::ica::fastica;
use crate::em::mstep::{design_gram_inverse, design_row, VARIANCE_FLOOR};
use crate::em::FitConfig;
use crate::error::{LicaError, Result};
use crate::linalg::polar_orthogonal;

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub ica_max_sweeps: usize,
    pub ica_tol: f64,
    pub procrustes_rounds: usize,
    /// Share of the level-1 plus level-2 residual variance assigned to
    /// sigma0^2; only their sum is identified by the likelihood.
    pub noise_fraction: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { ica_max_sweeps: 200, ica_tol: 1e-6, procrustes_rounds: 2, noise_fraction: 0.5 }
    }
}

/// Spatial ICA of the temporally concatenated data: q x V population maps
/// with unit variance, signs set so each map has a positive heavy tail.
pub fn group_ica(ds: &LongitudinalDataset, q: usize, cfg: &InitConfig, seed: u64) -> Result<DMatrix<f64>> {
    let nv = ds.n_voxels();
    let rows = ds.blocks.len() * ds.q();
    let mut x = DMatrix::zeros(rows, nv);
    for (b, blk) in ds.blocks.iter().enumerate() {
        x.view_mut((b * ds.q(), 0), (ds.q(), nv)).copy_from(blk);
    }
    for mut row in x.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let gram = &x * x.transpose() / nv as f64;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]];
    let lam_q = eig.eigenvalues[order[q - 1]];
    if !(top > 0.0) || lam_q <= 1e-12 * top {
        return Err(LicaError::Init(format!(
            "concatenated data has fewer than {q} non-degenerate principal components"
        )));
    }
    let mut proj = DMatrix::zeros(q, rows);
    for (r, &k) in order.iter().take(q).enumerate() {
        let scale = 1.0 / eig.eigenvalues[k].sqrt();
        for c in 0..rows {
            proj[(r, c)] = eig.eigenvectors[(c, k)] * scale;
        }
    }
    let z = proj * x;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ica = fastica(&z, cfg.ica_max_sweeps, cfg.ica_tol, &mut rng)?;
    let mut s = ica.unmixing * z;
    for mut row in s.row_iter_mut() {
        let skew: f64 = row.iter().map(|x| x * x * x).sum();
        if skew < 0.0 {
            row.neg_mut();
        }
    }
    Ok(s)
}

/// Deterministic 1-D k-means: first center at the median, the rest by
/// farthest-point selection, then Lloyd iterations.
pub fn kmeans_1d(values: &[f64], m: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if values.len() < m {
        return Err(LicaError::Init(format!("{} values for {m} clusters", values.len())));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut centers = vec![sorted[sorted.len() / 2]];
    while centers.len() < m {
        let far = sorted
            .iter()
            .copied()
            .max_by(|a, b| {
                let da = centers.iter().map(|c| (a - c).abs()).fold(f64::INFINITY, f64::min);
                let db = centers.iter().map(|c| (b - c).abs()).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .unwrap();
        centers.push(far);
    }
    let mut labels = vec![0usize; values.len()];
    for _ in 0..200 {
        let mut changed = false;
        for (i, x) in values.iter().enumerate() {
            let best = (0..m)
                .min_by(|&a, &b| (x - centers[a]).abs().total_cmp(&(x - centers[b]).abs()))
                .unwrap();
            if best != labels[i] {
                labels[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![0.0; m];
        let mut counts = vec![0usize; m];
        for (x, &l) in values.iter().zip(&labels) {
            sums[l] += x;
            counts[l] += 1;
        }
        for k in 0..m {
            if counts[k] == 0 {
                return Err(LicaError::Init(format!("k-means cluster {k} is empty")));
            }
            centers[k] = sums[k] / counts[k] as f64;
        }
        if !changed {
            break;
        }
    }
    Ok((centers, labels))
}

fn mog_from_kmeans(values: &[f64], m: usize) -> Result<IcMixture> {
    let (centers, labels) = kmeans_1d(values, m)?;
    let total_var = {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / values.len() as f64
    };
    let mut ic = IcMixture { weights: vec![0.0; m], means: centers.clone(), variances: vec![0.0; m] };
    for k in 0..m {
        let members: Vec<f64> = values.iter().zip(&labels).filter(|(_, &l)| l == k).map(|(x, _)| *x).collect();
        ic.weights[k] = members.len() as f64 / values.len() as f64;
        let var = members.iter().map(|x| (x - centers[k]).powi(2)).sum::<f64>() / members.len() as f64;
        ic.variances[k] = if members.len() > 1 && var > VARIANCE_FLOOR { var } else { (0.01 * total_var).max(VARIANCE_FLOOR) };
    }
    ic.sort_background_first();
    Ok(ic)
}

/// Builds Theta^0. Deterministic in (data, config, seed).
pub fn initialize(ds: &LongitudinalDataset, cfg: &FitConfig, seed: u64) -> Result<ModelParams> {
    let q = ds.q();
    let (n, kv, nv) = (ds.n_subjects, ds.n_visits, ds.n_voxels());
    let p = ds.n_covariates();
    for (b, blk) in ds.blocks.iter().enumerate() {
        if blk.iter().all(|x| *x == blk[(0, 0)]) {
            return Err(LicaError::Init(format!("data block {b} has zero variance")));
        }
    }
    let mut maps = group_ica(ds, q, &cfg.init, seed)?;
    let mut mixing: Vec<DMatrix<f64>> = Vec::new();
    for round in 0..=cfg.init.procrustes_rounds {
        mixing = ds
            .blocks
            .iter()
            .map(|y| polar_orthogonal(&(y * maps.transpose())))
            .collect::<Result<_>>()?;
        if round < cfg.init.procrustes_rounds {
            let mut mean = DMatrix::zeros(q, nv);
            for (a, y) in mixing.iter().zip(&ds.blocks) {
                mean += a.transpose() * y;
            }
            maps = mean / ds.blocks.len() as f64;
        }
    }
    let rotated: Vec<DMatrix<f64>> = mixing.iter().zip(&ds.blocks).map(|(a, y)| a.transpose() * y).collect();

    // least squares with an intercept at every visit; the baseline
    // intercept becomes s_0
    let ginv = design_gram_inverse(&ds.covariates, 1)?;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| design_row(&ds.covariates.row(i).iter().copied().collect::<Vec<_>>(), 1))
        .collect();
    let d = p + 1;
    let mut hat = DMatrix::<f64>::zeros(d, n);
    for (i, r) in rows.iter().enumerate() {
        for a in 0..d {
            hat[(a, i)] = (0..d).map(|b| ginv[(a, b)] * r[b]).sum();
        }
    }
    let mut s0 = DMatrix::zeros(q, nv);
    let mut alpha = vec![DMatrix::zeros(q, nv); kv];
    let mut beta = vec![DMatrix::zeros(p * q, nv); kv];
    for j in 0..kv {
        for v in 0..nv {
            for l in 0..q {
                let mut coef = vec![0.0; d];
                for i in 0..n {
                    let mut t = rotated[i * kv + j][(l, v)];
                    if j > 0 {
                        t -= s0[(l, v)];
                    }
                    for a in 0..d {
                        coef[a] += hat[(a, i)] * t;
                    }
                }
                if j == 0 {
                    s0[(l, v)] = coef[0];
                } else {
                    alpha[j][(l, v)] = coef[0];
                }
                for k in 0..p {
                    beta[j][(k * q + l, v)] = coef[1 + k];
                }
            }
        }
    }

    // residual moments: within-subject spread gives kappa, subject means give D
    let mut within = 0.0;
    let mut between = vec![0.0; q];
    let mut x = vec![0.0; p];
    let mut c = vec![0.0; q];
    let theta_fx = ModelParams {
        alpha: alpha.clone(),
        beta: beta.clone(),
        mixing: mixing.clone(),
        sigma0_sq: 1.0,
        d: vec![1.0; q],
        tau_sq: 1.0,
        mog: MogParams { ics: Vec::new() },
    };
    let mut resid = vec![0.0; kv * q];
    for v in 0..nv {
        for i in 0..n {
            for (k, xk) in x.iter_mut().enumerate() {
                *xk = ds.covariates[(i, k)];
            }
            for j in 0..kv {
                theta_fx.fixed_effect(j, v, &x, &mut c);
                for l in 0..q {
                    resid[j * q + l] = rotated[i * kv + j][(l, v)] - s0[(l, v)] - c[l];
                }
            }
            for l in 0..q {
                let mean = (0..kv).map(|j| resid[j * q + l]).sum::<f64>() / kv as f64;
                between[l] += mean * mean;
                within += (0..kv).map(|j| (resid[j * q + l] - mean).powi(2)).sum::<f64>();
            }
        }
    }
    let kappa = if kv > 1 {
        within / (n * (kv - 1) * nv * q) as f64
    } else {
        between.iter().sum::<f64>() / (2 * n * nv * q) as f64
    };
    let kappa = kappa.max(1e-6);
    let dvals: Vec<f64> = between
        .iter()
        .map(|b| {
            let raw = b / (n * nv) as f64 - kappa / kv as f64;
            raw.max(0.05 * kappa)
        })
        .collect();
    let f = cfg.init.noise_fraction.clamp(0.01, 0.99);

    let ics = (0..q)
        .map(|l| mog_from_kmeans(&s0.row(l).iter().copied().collect::<Vec<_>>(), cfg.m))
        .collect::<Result<Vec<_>>>()?;

    Ok(ModelParams {
        alpha,
        beta,
        mixing,
        sigma0_sq: f * kappa,
        d: dvals,
        tau_sq: (1.0 - f) * kappa,
        mog: MogParams { ics },
    })
}
