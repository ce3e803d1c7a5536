//! Random parameter sets and forward sampling from an arbitrary Theta.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datamodel::{IcMixture, LongitudinalDataset, ModelParams, MogParams};
use crate::error::Result;
use crate::linalg::polar_orthogonal;

/// Problem dimensions for a random instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub q: usize,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub p: usize,
    pub v: usize,
}

/// Latent draws behind a sampled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDraws {
    /// Latent state per voxel, `z[v][l]`.
    pub z: Vec<Vec<usize>>,
    pub s0: DMatrix<f64>,
    pub b: Vec<DMatrix<f64>>,
    pub s: Vec<DMatrix<f64>>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_orthogonal(q: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(q, q, |_, _| normal(rng));
    polar_orthogonal(&g).expect("Gaussian matrix is finite")
}

/// A random valid parameter set with moderately separated MoG components.
pub fn random_params(dims: Dims, seed: u64) -> ModelParams {
    let Dims { q, m, n, k, p, v } = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = (0..k)
        .map(|j| if j == 0 { DMatrix::zeros(q, v) } else { DMatrix::from_fn(q, v, |_, _| normal(&mut rng)) })
        .collect();
    let beta = (0..k).map(|_| DMatrix::from_fn(p * q, v, |_, _| 0.5 * normal(&mut rng))).collect();
    let mixing = (0..n * k).map(|_| random_orthogonal(q, &mut rng)).collect();
    let sigma0_sq = rng.random_range(0.3..1.5);
    let d = (0..q).map(|_| rng.random_range(0.3..1.5)).collect();
    let tau_sq = rng.random_range(0.2..1.0);
    let ics = (0..q)
        .map(|_| {
            let mut w: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..2.0)).collect();
            w[0] += 1.0;
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= total);
            let mut means = vec![rng.random_range(-0.2..0.2)];
            for c in 1..m {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                means.push(sign * (1.5 + 1.5 * c as f64 + rng.random_range(0.0..1.0)));
            }
            let variances = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
            let mut ic = IcMixture { weights: w, means, variances };
            ic.sort_background_first();
            ic
        })
        .collect();
    ModelParams { alpha, beta, mixing, sigma0_sq, d, tau_sq, mog: MogParams { ics } }
}

/// Standard normal covariates, N x p.
pub fn random_covariates(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, p, |_, _| normal(&mut rng))
}

/// Draws z, s_0, b, gamma and noise from the model defined by `theta`.
pub fn sample_from_model(
    theta: &ModelParams,
    covariates: &DMatrix<f64>,
    seed: u64,
) -> Result<(LongitudinalDataset, LatentDraws)> {
    let (q, n, k, nv) = (theta.q(), theta.n_subjects(), theta.n_visits(), theta.n_voxels());
    let p = covariates.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Vec::with_capacity(nv);
    let mut s0 = DMatrix::zeros(q, nv);
    for v in 0..nv {
        let mut zv = Vec::with_capacity(q);
        for l in 0..q {
            let ic = &theta.mog.ics[l];
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut state = ic.m() - 1;
            for (c, w) in ic.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    state = c;
                    break;
                }
            }
            s0[(l, v)] = ic.means[state] + ic.variances[state].sqrt() * normal(&mut rng);
            zv.push(state);
        }
        z.push(zv);
    }
    let b: Vec<DMatrix<f64>> = (0..n)
        .map(|_| DMatrix::from_fn(q, nv, |l, _| theta.d[l].sqrt() * normal(&mut rng)))
        .collect();
    let tau = theta.tau_sq.sqrt();
    let sd = theta.sigma0_sq.sqrt();
    let mut s = Vec::with_capacity(n * k);
    let mut blocks = Vec::with_capacity(n * k);
    let mut fx = vec![0.0; q];
    let mut x = vec![0.0; p];
    for i in 0..n {
        for (c, xc) in x.iter_mut().enumerate() {
            *xc = covariates[(i, c)];
        }
        for j in 0..k {
            let mut sij = DMatrix::zeros(q, nv);
            for v in 0..nv {
                theta.fixed_effect(j, v, &x, &mut fx);
                for l in 0..q {
                    sij[(l, v)] = s0[(l, v)] + b[i][(l, v)] + fx[l] + tau * normal(&mut rng);
                }
            }
            let noise = DMatrix::from_fn(q, nv, |_, _| sd * normal(&mut rng));
            blocks.push(&theta.mixing[i * k + j] * &sij + noise);
            s.push(sij);
        }
    }
    let ds = LongitudinalDataset::new(n, k, q, blocks, covariates.clone())?;
    Ok((ds, LatentDraws { z, s0, b, s }))
}

/// Random parameters plus a dataset drawn from them.
pub fn random_instance(dims: Dims, seed: u64) -> Result<(LongitudinalDataset, ModelParams)> {
    let theta = random_params(dims, seed);
    let cov = random_covariates(dims.n, dims.p, seed.wrapping_add(1));
    let (ds, _) = sample_from_model(&theta, &cov, seed.wrapping_add(2))?;
    Ok((ds, theta))
}
