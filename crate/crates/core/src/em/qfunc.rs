//! Expected complete-data log-likelihood Q = Q1 + ... + Q5, additive
//! constants omitted.

use crate::datamodel::{LongitudinalDataset, ModelParams};
use crate::em::estep::VoxelMoments;
use crate::em::mstep::{level1_residual, level2_residual};
use crate::em::PosteriorMoments;

/// The five terms at one voxel.
pub fn q_terms_voxel(theta: &ModelParams, mv: &VoxelMoments, ds: &LongitudinalDataset, v: usize) -> [f64; 5] {
    let (q, n, kv) = (mv.q, mv.n_subjects, mv.n_visits);
    let nk = (n * kv) as f64;
    let q1 = -0.5 * nk * q as f64 * theta.sigma0_sq.ln()
        - 0.5 * level1_residual(mv, ds, &theta.mixing, v) / theta.sigma0_sq;
    let q2 = -0.5 * nk * q as f64 * theta.tau_sq.ln()
        - 0.5 * level2_residual(mv, theta, &ds.covariates, v) / theta.tau_sq;
    let mut q3 = 0.0;
    for l in 0..q {
        q3 -= 0.5 * n as f64 * theta.d[l].ln();
        for i in 0..n {
            q3 -= 0.5 * mv.e_b_outer[i * q * q + l * q + l] / theta.d[l];
        }
    }
    let mut q4 = 0.0;
    let mut q5 = 0.0;
    let mg = &mv.marginals;
    for l in 0..q {
        let ic = &theta.mog.ics[l];
        for k in 0..mg.m {
            let p = mg.prob(l, k);
            if p == 0.0 {
                continue;
            }
            let (mu, s2) = (ic.means[k], ic.variances[k]);
            q4 -= 0.5 * p * (s2.ln() + (mu * mu + mg.sq(l, k) - 2.0 * mu * mg.mean(l, k)) / s2);
            q5 += p * ic.weights[k].ln();
        }
    }
    [q1, q2, q3, q4, q5]
}

pub fn q_terms(theta: &ModelParams, moments: &PosteriorMoments, ds: &LongitudinalDataset) -> [f64; 5] {
    let mut out = [0.0; 5];
    for (v, mv) in moments.voxels.iter().enumerate() {
        let t = q_terms_voxel(theta, mv, ds, v);
        for k in 0..5 {
            out[k] += t[k];
        }
    }
    out
}

pub fn q_function(theta: &ModelParams, moments: &PosteriorMoments, ds: &LongitudinalDataset) -> f64 {
    q_terms(theta, moments, ds).iter().sum()
}
