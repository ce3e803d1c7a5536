//! E-step: per-pattern conditional Gaussians, pattern posteriors and
//! mixture moments for one voxel.
//!
//! With orthogonal A_ij and isotropic noise, rotating each block by A_ij'
//! decouples the ICs: given z, IC l depends only on z_l. Every per-pattern
//! quantity is therefore assembled from per-(IC, state) closed forms, which
//! [`PatternCache`] precomputes once per parameter value. `em::dense` holds
//! the direct matrix implementation used as the test oracle.

use nalgebra::DMatrix;

use crate::datamodel::ModelParams;
use crate::error::{LicaError, Result};
use crate::linalg::log_sum_exp;
use crate::patterns::{realize_pattern, LatentPattern};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Posterior covariance structure of one IC in one MoG state. Depends on
/// the parameters only, not on the voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct IcState {
    pub mu: f64,
    pub sigma_sq: f64,
    pub nu_sq: f64,
    /// kappa + K nu^2, the per-subject visit-sum variance scale.
    pub denom: f64,
    pub v_psi: f64,
    pub var_b: f64,
    /// Cov(b_i, b_k | y), i != k.
    pub cov_bb: f64,
    pub cov_b_psi: f64,
    pub var_s: f64,
    pub cov_s_s0: f64,
    /// Cov(s_ij, b_i | y).
    pub cov_s_b: f64,
    /// log det of the marginal covariance of this IC's NK residuals.
    pub logdet: f64,
    /// sigma^2 / (1 + sigma^2 NK / denom), the rank-one correction weight.
    pub psi_shrink: f64,
}

/// Voxel-independent cache for a fixed parameter value.
#[derive(Debug, Clone)]
pub struct PatternCache {
    pub n_subjects: usize,
    pub n_visits: usize,
    pub q: usize,
    pub m: usize,
    pub sigma0_sq: f64,
    pub tau_sq: f64,
    pub kappa: f64,
    /// sigma0^2 / kappa
    pub rho: f64,
    /// tau^2 / kappa
    pub eta: f64,
    /// Indexed `l * m + k`.
    pub states: Vec<IcState>,
    pub patterns: Vec<LatentPattern>,
}

/// Per-voxel, per-(IC, state) quantities.
#[derive(Debug, Clone)]
pub struct VoxelTables {
    /// A_ij' y_ij, index `ij * q + l`.
    pub ytilde: Vec<f64>,
    /// C_j(v) x_i*, index `ij * q + l`.
    pub fixed: Vec<f64>,
    /// Index `l * m + k`.
    pub log_dens: Vec<f64>,
    pub e_s0: Vec<f64>,
    /// Index `(l * m + k) * N + i`.
    pub e_b: Vec<f64>,
    /// Index `(l * m + k) * NK + ij`.
    pub e_s: Vec<f64>,
}

/// Per-IC marginal posterior quantities. Index `l * m + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct IcMarginals {
    pub q: usize,
    pub m: usize,
    /// p[z_l = k | y]
    pub prob: Vec<f64>,
    /// E[s_0l | z_l = k, y]; 0 where the probability is 0.
    pub mean: Vec<f64>,
    /// E[s_0l^2 | z_l = k, y]; 0 where the probability is 0.
    pub sq: Vec<f64>,
}

impl IcMarginals {
    pub fn prob(&self, l: usize, k: usize) -> f64 {
        self.prob[l * self.m + k]
    }
    pub fn mean(&self, l: usize, k: usize) -> f64 {
        self.mean[l * self.m + k]
    }
    pub fn sq(&self, l: usize, k: usize) -> f64 {
        self.sq[l * self.m + k]
    }
}

/// Posterior moments of L(v) for one voxel. Square q x q blocks are stored
/// column-major; `E[X Y']` has entry (l, l') at `l' * q + l`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMoments {
    pub q: usize,
    pub n_subjects: usize,
    pub n_visits: usize,
    pub pattern_post: Vec<f64>,
    pub e_s0: Vec<f64>,
    pub e_s0_outer: Vec<f64>,
    /// Index `i * q + l`.
    pub e_b: Vec<f64>,
    pub e_b_outer: Vec<f64>,
    /// E[b_i s_0'].
    pub e_b_s0: Vec<f64>,
    /// Index `ij * q + l`.
    pub e_s: Vec<f64>,
    pub e_s_outer: Vec<f64>,
    /// E[s_0 s_ij'].
    pub e_s0_s: Vec<f64>,
    /// E[b_i s_ij'].
    pub e_b_s: Vec<f64>,
    pub marginals: IcMarginals,
}

fn block(data: &[f64], idx: usize, q: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(q, q, &data[idx * q * q..(idx + 1) * q * q])
}

impl VoxelMoments {
    pub(crate) fn zeros(q: usize, n: usize, k: usize, n_patterns: usize, m: usize) -> Self {
        let nk = n * k;
        Self {
            q,
            n_subjects: n,
            n_visits: k,
            pattern_post: vec![0.0; n_patterns],
            e_s0: vec![0.0; q],
            e_s0_outer: vec![0.0; q * q],
            e_b: vec![0.0; n * q],
            e_b_outer: vec![0.0; n * q * q],
            e_b_s0: vec![0.0; n * q * q],
            e_s: vec![0.0; nk * q],
            e_s_outer: vec![0.0; nk * q * q],
            e_s0_s: vec![0.0; nk * q * q],
            e_b_s: vec![0.0; nk * q * q],
            marginals: IcMarginals { q, m, prob: vec![0.0; q * m], mean: vec![0.0; q * m], sq: vec![0.0; q * m] },
        }
    }

    pub fn s0(&self) -> &[f64] {
        &self.e_s0
    }
    pub fn s0_outer(&self) -> DMatrix<f64> {
        block(&self.e_s0_outer, 0, self.q)
    }
    pub fn b(&self, i: usize) -> &[f64] {
        &self.e_b[i * self.q..(i + 1) * self.q]
    }
    pub fn b_outer(&self, i: usize) -> DMatrix<f64> {
        block(&self.e_b_outer, i, self.q)
    }
    pub fn b_s0(&self, i: usize) -> DMatrix<f64> {
        block(&self.e_b_s0, i, self.q)
    }
    pub fn s(&self, i: usize, j: usize) -> &[f64] {
        let ij = i * self.n_visits + j;
        &self.e_s[ij * self.q..(ij + 1) * self.q]
    }
    pub fn s_outer(&self, i: usize, j: usize) -> DMatrix<f64> {
        block(&self.e_s_outer, i * self.n_visits + j, self.q)
    }
    pub fn s0_s(&self, i: usize, j: usize) -> DMatrix<f64> {
        block(&self.e_s0_s, i * self.n_visits + j, self.q)
    }
    pub fn b_s(&self, i: usize, j: usize) -> DMatrix<f64> {
        block(&self.e_b_s, i * self.n_visits + j, self.q)
    }
}

/// Rotated observations and fixed effects for one voxel.
pub fn rotate_voxel(
    y_voxel: &[f64],
    v: usize,
    theta: &ModelParams,
    covariates: &DMatrix<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let q = theta.q();
    let k = theta.n_visits();
    let n = theta.n_subjects();
    let mut ytilde = vec![0.0; n * k * q];
    let mut fixed = vec![0.0; n * k * q];
    let mut x = vec![0.0; covariates.ncols()];
    for i in 0..n {
        for (c, xc) in x.iter_mut().enumerate() {
            *xc = covariates[(i, c)];
        }
        for j in 0..k {
            let ij = i * k + j;
            let a = &theta.mixing[ij];
            let y = &y_voxel[ij * q..(ij + 1) * q];
            for l in 0..q {
                let mut acc = 0.0;
                for r in 0..q {
                    acc += a[(r, l)] * y[r];
                }
                ytilde[ij * q + l] = acc;
            }
            theta.fixed_effect(j, v, &x, &mut fixed[ij * q..(ij + 1) * q]);
        }
    }
    (ytilde, fixed)
}

impl PatternCache {
    pub fn build(theta: &ModelParams, skeletons: &[Vec<usize>]) -> Result<Self> {
        let q = theta.q();
        let m = theta.mog.m();
        let n = theta.n_subjects();
        let kv = theta.n_visits();
        let (s0, t2) = (theta.sigma0_sq, theta.tau_sq);
        if !(s0 > 0.0 && t2 > 0.0 && theta.d.iter().all(|d| *d > 0.0)) {
            return Err(LicaError::Numeric(format!(
                "non-positive variance (sigma0^2 = {s0}, tau^2 = {t2}, D = {:?})",
                theta.d
            )));
        }
        let kappa = s0 + t2;
        let rho = s0 / kappa;
        let eta = t2 / kappa;
        let nk = (n * kv) as f64;
        let mut states = Vec::with_capacity(q * m);
        for l in 0..q {
            let nu_sq = theta.d[l];
            for k in 0..m {
                let mu = theta.mog.ics[l].means[k];
                let sigma_sq = theta.mog.ics[l].variances[k];
                if !(sigma_sq > 0.0) {
                    return Err(LicaError::Numeric(format!("IC {l} component {k} has variance {sigma_sq}")));
                }
                let denom = kappa + kv as f64 * nu_sq;
                let v_psi = sigma_sq * denom / (denom + nk * sigma_sq);
                let c_over_a = kv as f64 * nu_sq / denom;
                let inv_a = nu_sq * kappa / denom;
                let cov_bb = c_over_a * c_over_a * v_psi;
                let var_b = inv_a + cov_bb;
                let cov_b_psi = -c_over_a * v_psi;
                let var_u = var_b + v_psi + 2.0 * cov_b_psi;
                let cov_u_psi = cov_b_psi + v_psi;
                let cov_u_b = var_b + cov_b_psi;
                let ratio = 1.0 + sigma_sq * nk / denom;
                states.push(IcState {
                    mu,
                    sigma_sq,
                    nu_sq,
                    denom,
                    v_psi,
                    var_b,
                    cov_bb,
                    cov_b_psi,
                    var_s: rho * rho * var_u + t2 * s0 / kappa,
                    cov_s_s0: rho * cov_u_psi,
                    cov_s_b: rho * cov_u_b,
                    logdet: n as f64 * ((kv as f64 - 1.0) * kappa.ln() + denom.ln()) + ratio.ln(),
                    psi_shrink: sigma_sq / ratio,
                });
            }
        }
        let patterns = skeletons.iter().map(|z| realize_pattern(z, &theta.mog)).collect();
        Ok(Self { n_subjects: n, n_visits: kv, q, m, sigma0_sq: s0, tau_sq: t2, kappa, rho, eta, states, patterns })
    }

    pub fn state(&self, l: usize, k: usize) -> &IcState {
        &self.states[l * self.m + k]
    }

    pub fn n_patterns(&self) -> usize {
        self.patterns.len()
    }

    /// Per-(IC, state) log-densities and conditional means at one voxel.
    pub fn voxel_tables(
        &self,
        y_voxel: &[f64],
        v: usize,
        theta: &ModelParams,
        covariates: &DMatrix<f64>,
    ) -> VoxelTables {
        let (q, m, n, kv) = (self.q, self.m, self.n_subjects, self.n_visits);
        let nk = n * kv;
        let (ytilde, fixed) = rotate_voxel(y_voxel, v, theta, covariates);
        let mut log_dens = vec![0.0; q * m];
        let mut e_s0 = vec![0.0; q * m];
        let mut e_b = vec![0.0; q * m * n];
        let mut e_s = vec![0.0; q * m * nk];
        let mut base = vec![0.0; nk];
        let mut subj = vec![0.0; n];
        for l in 0..q {
            for ij in 0..nk {
                base[ij] = ytilde[ij * q + l] - fixed[ij * q + l];
            }
            for k in 0..m {
                let st = self.state(l, k);
                let idx = l * m + k;
                let mu = st.mu;
                let mut wsq = 0.0;
                let mut total = 0.0;
                let mut ssq = 0.0;
                for i in 0..n {
                    let mut s = 0.0;
                    for j in 0..kv {
                        let w = base[i * kv + j] - mu;
                        s += w;
                        wsq += w * w;
                    }
                    subj[i] = s;
                    total += s;
                    ssq += s * s;
                }
                let tn = total / st.denom;
                let quad = (wsq - st.nu_sq / st.denom * ssq) / self.kappa - st.psi_shrink * tn * tn;
                log_dens[idx] = -0.5 * (nk as f64 * LN_2PI + st.logdet + quad);
                let m_psi = st.v_psi * tn;
                e_s0[idx] = mu + m_psi;
                let shrink = st.nu_sq / st.denom;
                for i in 0..n {
                    let m_b = (subj[i] - kv as f64 * m_psi) * shrink;
                    e_b[idx * n + i] = m_b;
                    let e_u = m_b + m_psi;
                    for j in 0..kv {
                        let ij = i * kv + j;
                        let w = base[ij] - mu;
                        e_s[idx * nk + ij] = mu + fixed[ij * q + l] + self.rho * e_u + self.eta * w;
                    }
                }
            }
        }
        VoxelTables { ytilde, fixed, log_dens, e_s0, e_b, e_s }
    }

    /// Unnormalized log weights log(prior) + log p(y | z), one per pattern.
    pub fn log_weights(&self, t: &VoxelTables) -> Result<Vec<f64>> {
        let m = self.m;
        self.patterns
            .iter()
            .enumerate()
            .map(|(r, p)| {
                let mut lw = p.prior_log;
                for (l, &k) in p.z.iter().enumerate() {
                    lw += t.log_dens[l * m + k];
                }
                if lw.is_nan() || lw == f64::INFINITY {
                    return Err(LicaError::Numeric(format!("non-finite log-density for pattern {r} (z = {:?})", p.z)));
                }
                Ok(lw)
            })
            .collect()
    }

    /// p[z | y] over this cache's pattern set (renormalized to sum to 1).
    pub fn pattern_posterior(&self, t: &VoxelTables) -> Result<Vec<f64>> {
        let lw = self.log_weights(t)?;
        let lse = log_sum_exp(&lw);
        if !lse.is_finite() {
            return Err(LicaError::Numeric("all pattern log-weights are -inf".into()));
        }
        Ok(lw.iter().map(|w| (w - lse).exp()).collect())
    }

    /// log p(y(v)) summed over this cache's pattern set.
    pub fn voxel_loglik(&self, t: &VoxelTables) -> Result<f64> {
        Ok(log_sum_exp(&self.log_weights(t)?))
    }

    /// Sigma_{r|y} for pattern `r` assembled from the per-IC closed forms.
    /// Ordering of r: b_i (i*q + l), psi (Nq + l), gamma_ij (Nq + q + ij*q + l).
    pub fn sigma_r_given_y(&self, r: usize) -> DMatrix<f64> {
        let (q, n, kv) = (self.q, self.n_subjects, self.n_visits);
        let nk = n * kv;
        let dim = n * q + q + nk * q;
        let mut out = DMatrix::zeros(dim, dim);
        let z = &self.patterns[r].z;
        let bi = |i: usize, l: usize| i * q + l;
        let pi = |l: usize| n * q + l;
        let gi = |ij: usize, l: usize| n * q + q + ij * q + l;
        let xi = self.tau_sq * self.sigma0_sq / self.kappa;
        for l in 0..q {
            let st = self.state(l, z[l]);
            let cov_b = |i: usize, k: usize| if i == k { st.var_b } else { st.cov_bb };
            let cov_u_b = |i: usize, k: usize| cov_b(i, k) + st.cov_b_psi;
            let cov_u_psi = st.cov_b_psi + st.v_psi;
            let cov_u_u = |i: usize, k: usize| cov_b(i, k) + 2.0 * st.cov_b_psi + st.v_psi;
            out[(pi(l), pi(l))] = st.v_psi;
            for i in 0..n {
                out[(bi(i, l), pi(l))] = st.cov_b_psi;
                out[(pi(l), bi(i, l))] = st.cov_b_psi;
                for k in 0..n {
                    out[(bi(i, l), bi(k, l))] = cov_b(i, k);
                }
            }
            for ij in 0..nk {
                let i = ij / kv;
                let g = gi(ij, l);
                let c = -self.eta * cov_u_psi;
                out[(g, pi(l))] = c;
                out[(pi(l), g)] = c;
                for k in 0..n {
                    let c = -self.eta * cov_u_b(i, k);
                    out[(g, bi(k, l))] = c;
                    out[(bi(k, l), g)] = c;
                }
                for kl in 0..nk {
                    let k = kl / kv;
                    let mut c = self.eta * self.eta * cov_u_u(i, k);
                    if ij == kl {
                        c += xi;
                    }
                    out[(g, gi(kl, l))] = c;
                }
            }
        }
        out
    }

    /// log det of the marginal covariance A R Gamma_z R'A' + Upsilon.
    pub fn marginal_logdet(&self, r: usize) -> f64 {
        self.patterns[r].z.iter().enumerate().map(|(l, &k)| self.state(l, k).logdet).sum()
    }
}

/// Per-IC marginal state probabilities and moments from pattern-level quantities.
/// `cond_mean` and `cond_sq` hold E[s_0l | z, y] and E[s_0l^2 | z, y] per
/// pattern, index `r * q + l`.
pub fn marginal_ic_moments(
    patterns: &[Vec<usize>],
    post: &[f64],
    cond_mean: &[f64],
    cond_sq: &[f64],
    q: usize,
    m: usize,
) -> IcMarginals {
    let mut prob = vec![0.0; q * m];
    let mut mean = vec![0.0; q * m];
    let mut sq = vec![0.0; q * m];
    for (r, z) in patterns.iter().enumerate() {
        for (l, &k) in z.iter().enumerate() {
            let idx = l * m + k;
            prob[idx] += post[r];
            mean[idx] += post[r] * cond_mean[r * q + l];
            sq[idx] += post[r] * cond_sq[r * q + l];
        }
    }
    for idx in 0..q * m {
        if prob[idx] > 0.0 {
            mean[idx] /= prob[idx];
            sq[idx] /= prob[idx];
        } else {
            mean[idx] = 0.0;
            sq[idx] = 0.0;
        }
    }
    IcMarginals { q, m, prob, mean, sq }
}

fn add_outer(dst: &mut [f64], w: f64, x: &[f64], y: &[f64]) {
    let q = x.len();
    for c in 0..q {
        let wy = w * y[c];
        let col = &mut dst[c * q..(c + 1) * q];
        for r in 0..q {
            col[r] += x[r] * wy;
        }
    }
}

/// E-step for one voxel: pattern posterior, per-IC marginals and mixture
/// moments of L(v). Pure in (y, theta, covariates).
pub fn estep_voxel(
    y_voxel: &[f64],
    v: usize,
    theta: &ModelParams,
    covariates: &DMatrix<f64>,
    cache: &PatternCache,
) -> Result<VoxelMoments> {
    let t = cache.voxel_tables(y_voxel, v, theta, covariates);
    moments_from_tables(cache, &t)
}

pub fn moments_from_tables(cache: &PatternCache, t: &VoxelTables) -> Result<VoxelMoments> {
    let (q, m, n, kv) = (cache.q, cache.m, cache.n_subjects, cache.n_visits);
    let nk = n * kv;
    let post = cache.pattern_posterior(t)?;
    let mut out = VoxelMoments::zeros(q, n, kv, post.len(), m);

    let skeletons: Vec<Vec<usize>> = cache.patterns.iter().map(|p| p.z.clone()).collect();
    let mut cond_mean = vec![0.0; post.len() * q];
    let mut cond_sq = vec![0.0; post.len() * q];
    for (r, z) in skeletons.iter().enumerate() {
        for (l, &k) in z.iter().enumerate() {
            let e = t.e_s0[l * m + k];
            cond_mean[r * q + l] = e;
            cond_sq[r * q + l] = e * e + cache.state(l, k).v_psi;
        }
    }
    out.marginals = marginal_ic_moments(&skeletons, &post, &cond_mean, &cond_sq, q, m);

    let mut ms0 = vec![0.0; q];
    let mut mb = vec![0.0; n * q];
    let mut ms = vec![0.0; nk * q];
    for (r, z) in skeletons.iter().enumerate() {
        let p = post[r];
        if p == 0.0 {
            continue;
        }
        for (l, &k) in z.iter().enumerate() {
            let idx = l * m + k;
            ms0[l] = t.e_s0[idx];
            for i in 0..n {
                mb[i * q + l] = t.e_b[idx * n + i];
            }
            for ij in 0..nk {
                ms[ij * q + l] = t.e_s[idx * nk + ij];
            }
        }
        for l in 0..q {
            out.e_s0[l] += p * ms0[l];
        }
        add_outer(&mut out.e_s0_outer, p, &ms0, &ms0);
        for i in 0..n {
            let b = &mb[i * q..(i + 1) * q];
            for l in 0..q {
                out.e_b[i * q + l] += p * b[l];
            }
            add_outer(&mut out.e_b_outer[i * q * q..(i + 1) * q * q], p, b, b);
            add_outer(&mut out.e_b_s0[i * q * q..(i + 1) * q * q], p, b, &ms0);
        }
        for ij in 0..nk {
            let i = ij / kv;
            let s = &ms[ij * q..(ij + 1) * q];
            let b = &mb[i * q..(i + 1) * q];
            for l in 0..q {
                out.e_s[ij * q + l] += p * s[l];
            }
            let blk = ij * q * q..(ij + 1) * q * q;
            add_outer(&mut out.e_s_outer[blk.clone()], p, s, s);
            add_outer(&mut out.e_s0_s[blk.clone()], p, &ms0, s);
            add_outer(&mut out.e_b_s[blk], p, b, s);
        }
    }

    // conditional covariances are diagonal across ICs and depend on z_l only
    for l in 0..q {
        let d = l * q + l;
        for k in 0..m {
            let pk = out.marginals.prob(l, k);
            if pk == 0.0 {
                continue;
            }
            let st = cache.state(l, k);
            out.e_s0_outer[d] += pk * st.v_psi;
            for i in 0..n {
                out.e_b_outer[i * q * q + d] += pk * st.var_b;
                out.e_b_s0[i * q * q + d] += pk * st.cov_b_psi;
            }
            for ij in 0..nk {
                out.e_s_outer[ij * q * q + d] += pk * st.var_s;
                out.e_s0_s[ij * q * q + d] += pk * st.cov_s_s0;
                out.e_b_s[ij * q * q + d] += pk * st.cov_s_b;
            }
        }
    }
    out.pattern_post = post;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{IcMixture, MogParams};
    use crate::em::dense::{dense_estep_voxel, dense_voxel_loglik, DenseSystem};
    use crate::patterns::{enumerate_patterns, realize_pattern, PatternMode};
    use crate::simgen::{random_instance, Dims};
    use proptest::prelude::*;

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn compare(a: &VoxelMoments, b: &VoxelMoments) -> f64 {
        [
            max_diff(&a.pattern_post, &b.pattern_post),
            max_diff(&a.e_s0, &b.e_s0),
            max_diff(&a.e_s0_outer, &b.e_s0_outer),
            max_diff(&a.e_b, &b.e_b),
            max_diff(&a.e_b_outer, &b.e_b_outer),
            max_diff(&a.e_b_s0, &b.e_b_s0),
            max_diff(&a.e_s, &b.e_s),
            max_diff(&a.e_s_outer, &b.e_s_outer),
            max_diff(&a.e_s0_s, &b.e_s0_s),
            max_diff(&a.e_b_s, &b.e_b_s),
            max_diff(&a.marginals.prob, &b.marginals.prob),
            max_diff(&a.marginals.mean, &b.marginals.mean),
            max_diff(&a.marginals.sq, &b.marginals.sq),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    fn check_against_dense(dims: Dims, seed: u64, mode: PatternMode) {
        let (ds, theta) = random_instance(dims, seed).unwrap();
        let pats = enumerate_patterns(dims.q, dims.m, mode, u64::MAX).unwrap();
        let cache = PatternCache::build(&theta, &pats).unwrap();
        for v in 0..dims.v {
            let y = ds.voxel(v);
            let fast = estep_voxel(&y, v, &theta, &ds.covariates, &cache).unwrap();
            let slow = dense_estep_voxel(&y, v, &theta, &ds.covariates, &pats).unwrap();
            let d = compare(&fast, &slow);
            assert!(d < 1e-8, "voxel {v}: max diff {d:e}");
            let t = cache.voxel_tables(&y, v, &theta, &ds.covariates);
            let ll = cache.voxel_loglik(&t).unwrap();
            let ll_dense = dense_voxel_loglik(&y, v, &theta, &ds.covariates, &pats).unwrap();
            assert!((ll - ll_dense).abs() < 1e-8 * ll.abs().max(1.0), "{ll} vs {ll_dense}");
        }
    }

    #[test]
    fn structured_matches_dense_small() {
        check_against_dense(Dims { q: 2, m: 2, n: 2, k: 2, p: 0, v: 10 }, 1, PatternMode::Exact);
    }

    #[test]
    fn structured_matches_dense_with_covariates() {
        check_against_dense(Dims { q: 3, m: 3, n: 3, k: 2, p: 2, v: 4 }, 2, PatternMode::Exact);
        check_against_dense(Dims { q: 2, m: 2, n: 1, k: 3, p: 1, v: 4 }, 3, PatternMode::Exact);
    }

    #[test]
    fn structured_matches_dense_subspace() {
        check_against_dense(Dims { q: 3, m: 2, n: 2, k: 2, p: 1, v: 5 }, 4, PatternMode::Subspace);
    }

    #[test]
    fn posterior_covariance_matches_dense() {
        let dims = Dims { q: 2, m: 2, n: 2, k: 2, p: 1, v: 3 };
        let (_, theta) = random_instance(dims, 5).unwrap();
        let pats = enumerate_patterns(2, 2, PatternMode::Exact, u64::MAX).unwrap();
        let cache = PatternCache::build(&theta, &pats).unwrap();
        let sys = DenseSystem::new(&theta);
        for (r, z) in pats.iter().enumerate() {
            let dense = sys.sigma_r_given_y(&theta, &realize_pattern(z, &theta.mog)).unwrap();
            let fast = cache.sigma_r_given_y(r);
            assert!((dense - fast).amax() < 1e-8);
        }
    }

    #[test]
    fn noise_free_identity_mixing() {
        let theta = ModelParams {
            alpha: vec![DMatrix::zeros(1, 1)],
            beta: vec![DMatrix::zeros(0, 1)],
            mixing: vec![DMatrix::identity(1, 1)],
            sigma0_sq: 1e-12,
            d: vec![1.0],
            tau_sq: 1.0,
            mog: MogParams { ics: vec![IcMixture { weights: vec![0.6, 0.4], means: vec![0.0, 3.0], variances: vec![1.0, 1.0] }] },
        };
        let pats = enumerate_patterns(1, 2, PatternMode::Exact, 10).unwrap();
        let cache = PatternCache::build(&theta, &pats).unwrap();
        let cov = DMatrix::zeros(1, 0);
        for y in [-1.3, 0.2, 2.7] {
            let mm = estep_voxel(&[y], 0, &theta, &cov, &cache).unwrap();
            assert!((mm.e_s[0] - y).abs() < 1e-5);
        }
    }

    #[test]
    fn symmetric_mixture_at_zero() {
        let a = 2.0;
        let theta = ModelParams {
            alpha: vec![DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)],
            beta: vec![DMatrix::zeros(0, 1); 2],
            mixing: vec![DMatrix::identity(1, 1); 4],
            sigma0_sq: 0.7,
            d: vec![0.5],
            tau_sq: 0.3,
            mog: MogParams { ics: vec![IcMixture { weights: vec![0.5, 0.5], means: vec![-a, a], variances: vec![1.0, 1.0] }] },
        };
        let pats = enumerate_patterns(1, 2, PatternMode::Exact, 10).unwrap();
        let cache = PatternCache::build(&theta, &pats).unwrap();
        let cov = DMatrix::zeros(2, 0);
        let mm = estep_voxel(&[0.0; 4], 0, &theta, &cov, &cache).unwrap();
        assert!((mm.pattern_post[0] - 0.5).abs() < 1e-14 && (mm.pattern_post[1] - 0.5).abs() < 1e-14);
        assert!(mm.e_s0[0].abs() < 1e-14);
    }

    #[test]
    fn single_component_loglik_is_gaussian() {
        let dims = Dims { q: 2, m: 1, n: 2, k: 2, p: 1, v: 3 };
        let (ds, theta) = random_instance(dims, 8).unwrap();
        let pats = enumerate_patterns(2, 1, PatternMode::Exact, 10).unwrap();
        assert_eq!(pats.len(), 1);
        let sys = DenseSystem::new(&theta);
        let pat = realize_pattern(&pats[0], &theta.mog);
        let cache = PatternCache::build(&theta, &pats).unwrap();
        for v in 0..3 {
            let y = ds.voxel(v);
            let direct = sys
                .pattern_moments(&nalgebra::DVector::from_column_slice(&y), &theta, &ds.covariates, v, &pat)
                .unwrap()
                .log_marginal;
            let t = cache.voxel_tables(&y, v, &theta, &ds.covariates);
            assert!((cache.voxel_loglik(&t).unwrap() - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn loglik_invariant_to_pattern_order() {
        let dims = Dims { q: 2, m: 3, n: 2, k: 2, p: 1, v: 3 };
        let (ds, theta) = random_instance(dims, 9).unwrap();
        let pats = enumerate_patterns(2, 3, PatternMode::Exact, 100).unwrap();
        let mut rev = pats.clone();
        rev.reverse();
        let a = PatternCache::build(&theta, &pats).unwrap();
        let b = PatternCache::build(&theta, &rev).unwrap();
        for v in 0..3 {
            let y = ds.voxel(v);
            let la = a.voxel_loglik(&a.voxel_tables(&y, v, &theta, &ds.covariates)).unwrap();
            let lb = b.voxel_loglik(&b.voxel_tables(&y, v, &theta, &ds.covariates)).unwrap();
            assert!((la - lb).abs() < 1e-10);
        }
    }

    #[test]
    fn marginals_for_one_ic_equal_pattern_level() {
        let dims = Dims { q: 1, m: 3, n: 2, k: 2, p: 0, v: 2 };
        let (ds, theta) = random_instance(dims, 10).unwrap();
        let pats = enumerate_patterns(1, 3, PatternMode::Exact, 10).unwrap();
        let cache = PatternCache::build(&theta, &pats).unwrap();
        let y = ds.voxel(0);
        let t = cache.voxel_tables(&y, 0, &theta, &ds.covariates);
        let mm = moments_from_tables(&cache, &t).unwrap();
        for k in 0..3 {
            assert_eq!(mm.marginals.prob(0, k), mm.pattern_post[k]);
            assert!((mm.marginals.mean(0, k) - t.e_s0[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_probability_state_gives_zero_moments() {
        let pats = vec![vec![0, 0], vec![1, 0]];
        let post = vec![0.3, 0.7];
        let cm = vec![1.0, 2.0, 3.0, 4.0];
        let cs = vec![5.0, 6.0, 7.0, 8.0];
        let mg = marginal_ic_moments(&pats, &post, &cm, &cs, 2, 2);
        assert_eq!(mg.prob(1, 1), 0.0);
        assert_eq!((mg.mean(1, 1), mg.sq(1, 1)), (0.0, 0.0));
        assert!((mg.mean(1, 0) - (0.3 * 2.0 + 0.7 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn subspace_posterior_is_renormalized_exact() {
        let dims = Dims { q: 3, m: 2, n: 2, k: 2, p: 1, v: 4 };
        let (ds, theta) = random_instance(dims, 12).unwrap();
        let full = enumerate_patterns(3, 2, PatternMode::Exact, 100).unwrap();
        let sub = enumerate_patterns(3, 2, PatternMode::Subspace, 100).unwrap();
        let cf = PatternCache::build(&theta, &full).unwrap();
        let cs = PatternCache::build(&theta, &sub).unwrap();
        for v in 0..4 {
            let y = ds.voxel(v);
            let pf = cf.pattern_posterior(&cf.voxel_tables(&y, v, &theta, &ds.covariates)).unwrap();
            let ps = cs.pattern_posterior(&cs.voxel_tables(&y, v, &theta, &ds.covariates)).unwrap();
            let idx: Vec<usize> = sub.iter().map(|z| full.iter().position(|f| f == z).unwrap()).collect();
            let mass: f64 = idx.iter().map(|&r| pf[r]).sum();
            for (s, &r) in idx.iter().enumerate() {
                assert!((ps[s] - pf[r] / mass).abs() < 1e-12);
            }
        }
    }

    fn min_eig(m: DMatrix<f64>) -> f64 {
        let sym = (&m + m.transpose()) * 0.5;
        sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn moment_invariants(seed in 0u64..5000, q in 1usize..4, m in 1usize..4, n in 1usize..4, k in 1usize..3) {
            let dims = Dims { q, m, n, k, p: 1, v: 2 };
            let (ds, theta) = random_instance(dims, seed).unwrap();
            let pats = enumerate_patterns(q, m, PatternMode::Exact, 1000).unwrap();
            let cache = PatternCache::build(&theta, &pats).unwrap();
            for v in 0..2 {
                let y = ds.voxel(v);
                let mm = estep_voxel(&y, v, &theta, &ds.covariates, &cache).unwrap();
                prop_assert!((mm.pattern_post.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                for l in 0..q {
                    let tot: f64 = (0..m).map(|c| mm.marginals.prob(l, c)).sum();
                    prop_assert!((tot - 1.0).abs() < 1e-10);
                }
                let outer = |x: &[f64]| {
                    let d = nalgebra::DVector::from_column_slice(x);
                    &d * d.transpose()
                };
                prop_assert!(min_eig(mm.s0_outer() - outer(mm.s0())) > -1e-8);
                for i in 0..n {
                    prop_assert!(min_eig(mm.b_outer(i) - outer(mm.b(i))) > -1e-8);
                    for j in 0..k {
                        prop_assert!(min_eig(mm.s_outer(i, j) - outer(mm.s(i, j))) > -1e-8);
                    }
                }
                // Marginals are sums against the pattern-level posterior.
                for l in 0..q {
                    let mean: f64 = (0..m).map(|c| mm.marginals.prob(l, c) * mm.marginals.mean(l, c)).sum();
                    prop_assert!((mean - mm.e_s0[l]).abs() < 1e-9);
                    let sq: f64 = (0..m).map(|c| mm.marginals.prob(l, c) * mm.marginals.sq(l, c)).sum();
                    prop_assert!((sq - mm.e_s0_outer[l * q + l]).abs() < 1e-9 * sq.abs().max(1.0));
                }
                let again = estep_voxel(&y, v, &theta, &ds.covariates, &cache).unwrap();
                prop_assert_eq!(&again, &mm);
            }
        }
    }
}
