//! Direct matrix implementation of the E-step for one voxel: builds A, R,
//! Gamma_z, P and Q_z explicitly and conditions with Cholesky solves.
//! Cubic in NKq; used as the reference the structured path is tested
//! against.

use nalgebra::{DMatrix, DVector};

use crate::datamodel::ModelParams;
use crate::em::estep::{marginal_ic_moments, VoxelMoments};
use crate::error::{LicaError, Result};
use crate::linalg::{cholesky_jitter, log_sum_exp, mvn_log_density};
use crate::patterns::{realize_pattern, LatentPattern};

pub struct DenseSystem {
    pub q: usize,
    pub n: usize,
    pub k: usize,
    /// blockdiag(A_11, ..., A_NK)
    pub a: DMatrix<f64>,
    /// (I_N (x) 1_K) (x) I_q
    pub h: DMatrix<f64>,
    /// 1_NK (x) I_q
    pub u: DMatrix<f64>,
    /// [H, U, I]
    pub r: DMatrix<f64>,
    /// Maps r to L = [b; s_0; s_11 .. s_NK] (without the Q_z shift).
    pub p: DMatrix<f64>,
}

pub struct DensePatternMoments {
    pub l_mean: DVector<f64>,
    pub l_cov: DMatrix<f64>,
    pub log_marginal: f64,
    pub sigma_r: DMatrix<f64>,
}

impl DenseSystem {
    pub fn new(theta: &ModelParams) -> Self {
        let q = theta.q();
        let n = theta.n_subjects();
        let k = theta.n_visits();
        let nk = n * k;
        let mut a = DMatrix::zeros(nk * q, nk * q);
        for ij in 0..nk {
            a.view_mut((ij * q, ij * q), (q, q)).copy_from(&theta.mixing[ij]);
        }
        let mut h = DMatrix::zeros(nk * q, n * q);
        let mut u = DMatrix::zeros(nk * q, q);
        for ij in 0..nk {
            let i = ij / k;
            for l in 0..q {
                h[(ij * q + l, i * q + l)] = 1.0;
                u[(ij * q + l, l)] = 1.0;
            }
        }
        let dim_r = n * q + q + nk * q;
        let mut r = DMatrix::zeros(nk * q, dim_r);
        r.view_mut((0, 0), (nk * q, n * q)).copy_from(&h);
        r.view_mut((0, n * q), (nk * q, q)).copy_from(&u);
        r.view_mut((0, n * q + q), (nk * q, nk * q)).fill_with_identity();
        let mut p = DMatrix::zeros(dim_r, dim_r);
        p.view_mut((0, 0), (n * q + q, n * q + q)).fill_with_identity();
        p.view_mut((n * q + q, 0), (nk * q, dim_r)).copy_from(&r);
        Self { q, n, k, a, h, u, r, p }
    }

    pub fn gamma(&self, theta: &ModelParams, pattern: &LatentPattern) -> DMatrix<f64> {
        let (q, n) = (self.q, self.n);
        let dim = self.r.ncols();
        let mut g = DMatrix::zeros(dim, dim);
        for i in 0..n {
            for l in 0..q {
                g[(i * q + l, i * q + l)] = theta.d[l];
            }
        }
        for l in 0..q {
            g[(n * q + l, n * q + l)] = pattern.sigma_z[l];
        }
        for d in n * q + q..dim {
            g[(d, d)] = theta.tau_sq;
        }
        g
    }

    /// Stacked fixed effects C*(v) X*, block ij = C_j(v) x_i*.
    pub fn fixed_mean(&self, theta: &ModelParams, covariates: &DMatrix<f64>, v: usize) -> DVector<f64> {
        let q = self.q;
        let mut out = DVector::zeros(self.n * self.k * q);
        for i in 0..self.n {
            let x: Vec<f64> = covariates.row(i).iter().copied().collect();
            for j in 0..self.k {
                let ij = i * self.k + j;
                theta.fixed_effect(j, v, &x, &mut out.as_mut_slice()[ij * q..(ij + 1) * q]);
            }
        }
        out
    }

    pub fn sigma_r_given_y(&self, theta: &ModelParams, pattern: &LatentPattern) -> Result<DMatrix<f64>> {
        let gamma = self.gamma(theta, pattern);
        let gamma_inv = DMatrix::from_diagonal(&gamma.diagonal().map(|x| 1.0 / x));
        let ar = &self.a * &self.r;
        let precision = gamma_inv + ar.transpose() * &ar / theta.sigma0_sq;
        let chol = cholesky_jitter(&precision)?;
        Ok(chol.inverse())
    }

    pub fn pattern_moments(
        &self,
        y: &DVector<f64>,
        theta: &ModelParams,
        covariates: &DMatrix<f64>,
        v: usize,
        pattern: &LatentPattern,
    ) -> Result<DensePatternMoments> {
        let (q, n) = (self.q, self.n);
        let mu = DVector::from_column_slice(&pattern.mu_z);
        let fixed = self.fixed_mean(theta, covariates, v);
        let shift = &self.u * &mu + &fixed;
        let sigma_r = self.sigma_r_given_y(theta, pattern)?;
        let ar = &self.a * &self.r;
        let resid = y - &self.a * &shift;
        let mu_r = &sigma_r * ar.transpose() * resid / theta.sigma0_sq;
        let mut qz = DVector::zeros(self.p.nrows());
        for l in 0..q {
            qz[n * q + l] = mu[l];
        }
        qz.rows_mut(n * q + q, shift.len()).copy_from(&shift);
        let l_mean = &self.p * mu_r + qz;
        let l_cov = &self.p * &sigma_r * self.p.transpose();
        let gamma = self.gamma(theta, pattern);
        let mut marg_cov = &ar * gamma * ar.transpose();
        for d in 0..marg_cov.nrows() {
            marg_cov[(d, d)] += theta.sigma0_sq;
        }
        let log_marginal = mvn_log_density(y, &(&self.a * &shift), &marg_cov)?;
        Ok(DensePatternMoments { l_mean, l_cov, log_marginal, sigma_r })
    }
}

/// Dense E-step over an explicit pattern set; same output layout as the
/// structured `estep_voxel`.
pub fn dense_estep_voxel(
    y_voxel: &[f64],
    v: usize,
    theta: &ModelParams,
    covariates: &DMatrix<f64>,
    skeletons: &[Vec<usize>],
) -> Result<VoxelMoments> {
    let sys = DenseSystem::new(theta);
    let (q, n, k) = (sys.q, sys.n, sys.k);
    let m = theta.mog.m();
    let nk = n * k;
    let y = DVector::from_column_slice(y_voxel);
    let per: Vec<(LatentPattern, DensePatternMoments)> = skeletons
        .iter()
        .map(|z| {
            let p = realize_pattern(z, &theta.mog);
            let mom = sys.pattern_moments(&y, theta, covariates, v, &p)?;
            Ok((p, mom))
        })
        .collect::<Result<_>>()?;
    let lw: Vec<f64> = per.iter().map(|(p, mm)| p.prior_log + mm.log_marginal).collect();
    let lse = log_sum_exp(&lw);
    if !lse.is_finite() {
        return Err(LicaError::Numeric("dense E-step: all log-weights -inf".into()));
    }
    let post: Vec<f64> = lw.iter().map(|w| (w - lse).exp()).collect();
    let dim = sys.p.nrows();
    let mut mean = DVector::zeros(dim);
    let mut second = DMatrix::zeros(dim, dim);
    let mut cond_mean = vec![0.0; per.len() * q];
    let mut cond_sq = vec![0.0; per.len() * q];
    for (r, (_, mm)) in per.iter().enumerate() {
        mean += post[r] * &mm.l_mean;
        second += post[r] * (&mm.l_cov + &mm.l_mean * mm.l_mean.transpose());
        for l in 0..q {
            let e = mm.l_mean[n * q + l];
            cond_mean[r * q + l] = e;
            cond_sq[r * q + l] = e * e + mm.l_cov[(n * q + l, n * q + l)];
        }
    }
    let s0 = n * q;
    let s_at = |ij: usize| n * q + q + ij * q;
    let copy_block = |dst: &mut [f64], r0: usize, c0: usize| {
        for c in 0..q {
            for r in 0..q {
                dst[c * q + r] = second[(r0 + r, c0 + c)];
            }
        }
    };
    let mut out = VoxelMoments {
        q,
        n_subjects: n,
        n_visits: k,
        pattern_post: post.clone(),
        e_s0: mean.rows(s0, q).iter().copied().collect(),
        e_s0_outer: vec![0.0; q * q],
        e_b: mean.rows(0, n * q).iter().copied().collect(),
        e_b_outer: vec![0.0; n * q * q],
        e_b_s0: vec![0.0; n * q * q],
        e_s: mean.rows(s0 + q, nk * q).iter().copied().collect(),
        e_s_outer: vec![0.0; nk * q * q],
        e_s0_s: vec![0.0; nk * q * q],
        e_b_s: vec![0.0; nk * q * q],
        marginals: marginal_ic_moments(skeletons, &post, &cond_mean, &cond_sq, q, m),
    };
    copy_block(&mut out.e_s0_outer, s0, s0);
    for i in 0..n {
        copy_block(&mut out.e_b_outer[i * q * q..(i + 1) * q * q], i * q, i * q);
        copy_block(&mut out.e_b_s0[i * q * q..(i + 1) * q * q], i * q, s0);
    }
    for ij in 0..nk {
        let i = ij / k;
        let blk = ij * q * q..(ij + 1) * q * q;
        copy_block(&mut out.e_s_outer[blk.clone()], s_at(ij), s_at(ij));
        copy_block(&mut out.e_s0_s[blk.clone()], s0, s_at(ij));
        copy_block(&mut out.e_b_s[blk], i * q, s_at(ij));
    }
    Ok(out)
}

/// Dense log p(y(v)) over an explicit pattern set.
pub fn dense_voxel_loglik(
    y_voxel: &[f64],
    v: usize,
    theta: &ModelParams,
    covariates: &DMatrix<f64>,
    skeletons: &[Vec<usize>],
) -> Result<f64> {
    let sys = DenseSystem::new(theta);
    let y = DVector::from_column_slice(y_voxel);
    let lw = skeletons
        .iter()
        .map(|z| {
            let p = realize_pattern(z, &theta.mog);
            Ok(p.prior_log + sys.pattern_moments(&y, theta, covariates, v, &p)?.log_marginal)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(log_sum_exp(&lw))
}
