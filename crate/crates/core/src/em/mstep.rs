//! Closed-form M-step updates.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::datamodel::{IcMixture, LongitudinalDataset, ModelParams, MogParams};
use crate::em::PosteriorMoments;
use crate::error::{LicaError, Result};
use crate::linalg::polar_orthogonal;

pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Which matrix is orthogonalized in the mixing update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixingUpdate {
    /// polar(sum_v y E[s]'): the maximizer of Q over orthogonal matrices.
    CrossMoment,
    /// polar of the unconstrained least-squares solution
    /// (sum_v y E[s]')(sum_v E[ss'])^{-1}.
    Unconstrained,
}

impl std::str::FromStr for MixingUpdate {
    type Err = LicaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_moment" => Ok(MixingUpdate::CrossMoment),
            "unconstrained" => Ok(MixingUpdate::Unconstrained),
            other => Err(LicaError::Config(format!(
                "unknown mixing_update '{other}' (cross_moment|unconstrained)"
            ))),
        }
    }
}

/// Row x_i* of the visit-j design: x_i at baseline (no visit effect),
/// [1, x_i] afterwards.
pub fn design_row(x: &[f64], j: usize) -> Vec<f64> {
    if j == 0 {
        x.to_vec()
    } else {
        std::iter::once(1.0).chain(x.iter().copied()).collect()
    }
}

/// Inverse of sum_i x_i* x_i*' with a rank error naming collinear columns.
pub fn design_gram_inverse(covariates: &DMatrix<f64>, j: usize) -> Result<DMatrix<f64>> {
    let n = covariates.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| design_row(&covariates.row(i).iter().copied().collect::<Vec<_>>(), j))
        .collect();
    let d = rows.first().map_or(0, |r| r.len());
    let mut g = DMatrix::zeros(d, d);
    for r in &rows {
        for a in 0..d {
            for b in 0..d {
                g[(a, b)] += r[a] * r[b];
            }
        }
    }
    if d == 0 {
        return Ok(g);
    }
    let eig = SymmetricEigen::new(g.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let name = |c: usize| -> String {
        if j > 0 && c == 0 {
            "intercept".to_string()
        } else {
            format!("covariate {}", if j > 0 { c - 1 } else { c })
        }
    };
    let mut null_dirs = Vec::new();
    for k in 0..d {
        if eig.eigenvalues[k].abs() <= 1e-10 * max.max(f64::MIN_POSITIVE) {
            let v = eig.eigenvectors.column(k);
            let involved: Vec<String> = (0..d).filter(|&c| v[c].abs() > 1e-6).map(name).collect();
            null_dirs.push(format!("[{}]", involved.join(", ")));
        }
    }
    if !null_dirs.is_empty() {
        return Err(LicaError::Rank(format!(
            "design for visit {j} is rank deficient; collinear columns: {}",
            null_dirs.join("; ")
        )));
    }
    g.try_inverse().ok_or_else(|| LicaError::Rank(format!("design for visit {j} is singular")))
}

/// Updates C_j(v) = [alpha_j(v), beta_j(v)'] for every visit and voxel.
/// Returns (alpha, beta) in the `ModelParams` layout.
pub fn mstep_fixed_effects(
    moments: &PosteriorMoments,
    covariates: &DMatrix<f64>,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let first = moments
        .voxels
        .first()
        .ok_or_else(|| LicaError::Argument("no voxels in posterior moments".into()))?;
    let (q, n, kv) = (first.q, first.n_subjects, first.n_visits);
    let nv = moments.voxels.len();
    let p = covariates.ncols();
    let mut alpha = vec![DMatrix::zeros(q, nv); kv];
    let mut beta = vec![DMatrix::zeros(p * q, nv); kv];
    for j in 0..kv {
        let ginv = design_gram_inverse(covariates, j)?;
        let d = ginv.nrows();
        if d == 0 {
            continue;
        }
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| design_row(&covariates.row(i).iter().copied().collect::<Vec<_>>(), j))
            .collect();
        let off = usize::from(j > 0);
        let mut rhs = DMatrix::zeros(d, q);
        for (v, mv) in moments.voxels.iter().enumerate() {
            rhs.fill(0.0);
            for (i, row) in rows.iter().enumerate() {
                let s = mv.s(i, j);
                let b = mv.b(i);
                for l in 0..q {
                    let t = s[l] - mv.e_s0[l] - b[l];
                    for a in 0..d {
                        rhs[(a, l)] += row[a] * t;
                    }
                }
            }
            let c = &ginv * &rhs;
            for l in 0..q {
                if j > 0 {
                    alpha[j][(l, v)] = c[(0, l)];
                }
                for k in 0..p {
                    beta[j][(k * q + l, v)] = c[(off + k, l)];
                }
            }
        }
    }
    Ok((alpha, beta))
}

/// Updates every A_ij and orthogonalizes it.
pub fn mstep_mixing(
    moments: &PosteriorMoments,
    ds: &LongitudinalDataset,
    update: MixingUpdate,
) -> Result<Vec<DMatrix<f64>>> {
    let q = ds.q();
    let kv = ds.n_visits;
    (0..ds.blocks.len())
        .map(|ij| {
            let (i, j) = (ij / kv, ij % kv);
            let y = &ds.blocks[ij];
            let mut cross = DMatrix::zeros(q, q);
            let mut second = DMatrix::zeros(q, q);
            for (v, mv) in moments.voxels.iter().enumerate() {
                let s = mv.s(i, j);
                for c in 0..q {
                    for r in 0..q {
                        cross[(r, c)] += y[(r, v)] * s[c];
                    }
                }
                if update == MixingUpdate::Unconstrained {
                    second += mv.s_outer(i, j);
                }
            }
            let target = match update {
                MixingUpdate::CrossMoment => cross,
                MixingUpdate::Unconstrained => {
                    let inv = second.try_inverse().ok_or_else(|| {
                        LicaError::Numeric(format!("sum of E[s s'] is singular for block ({i}, {j})"))
                    })?;
                    cross * inv
                }
            };
            polar_orthogonal(&target)
        })
        .collect()
}

/// The orthogonalization H(.): nearest orthogonal matrix in Frobenius norm.
pub fn orthogonalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    polar_orthogonal(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceUpdate {
    pub sigma0_sq: f64,
    pub d: Vec<f64>,
    pub tau_sq: f64,
}

fn floor_variance(name: &str, x: f64) -> f64 {
    if x > VARIANCE_FLOOR {
        x
    } else {
        log::warn!("{name} update {x:e} clamped to {VARIANCE_FLOOR:e} (degenerate fit)");
        VARIANCE_FLOOR
    }
}

fn trace(data: &[f64], q: usize) -> f64 {
    (0..q).map(|l| data[l * q + l]).sum()
}

/// E||s_ij - s_0 - b_i - c_ij||^2 summed over (i, j) at one voxel.
pub fn level2_residual(mv: &crate::em::estep::VoxelMoments, theta: &ModelParams, covariates: &DMatrix<f64>, v: usize) -> f64 {
    let (q, n, kv) = (mv.q, mv.n_subjects, mv.n_visits);
    let qq = q * q;
    let tr_s0 = trace(&mv.e_s0_outer, q);
    let mut c = vec![0.0; q];
    let mut x = vec![0.0; covariates.ncols()];
    let mut acc = 0.0;
    for i in 0..n {
        for (k, xk) in x.iter_mut().enumerate() {
            *xk = covariates[(i, k)];
        }
        let tr_b = trace(&mv.e_b_outer[i * qq..(i + 1) * qq], q);
        let tr_bs0 = trace(&mv.e_b_s0[i * qq..(i + 1) * qq], q);
        for j in 0..kv {
            let ij = i * kv + j;
            theta.fixed_effect(j, v, &x, &mut c);
            let blk = ij * qq..(ij + 1) * qq;
            let mut t = trace(&mv.e_s_outer[blk.clone()], q) + tr_s0 + tr_b + 2.0 * tr_bs0
                - 2.0 * trace(&mv.e_s0_s[blk.clone()], q)
                - 2.0 * trace(&mv.e_b_s[blk], q);
            let s = mv.s(i, j);
            let b = mv.b(i);
            for l in 0..q {
                t += -2.0 * c[l] * (s[l] - mv.e_s0[l] - b[l]) + c[l] * c[l];
            }
            acc += t;
        }
    }
    acc
}

/// sum_ij y'y - 2 y'A E[s] + tr(A E[ss'] A') at one voxel.
pub fn level1_residual(mv: &crate::em::estep::VoxelMoments, ds: &LongitudinalDataset, mixing: &[DMatrix<f64>], v: usize) -> f64 {
    let kv = mv.n_visits;
    let mut acc = 0.0;
    for (ij, a) in mixing.iter().enumerate() {
        let (i, j) = (ij / kv, ij % kv);
        let y = ds.blocks[ij].column(v);
        let s = mv.s(i, j);
        let so = mv.s_outer(i, j);
        let ase = a * nalgebra::DVector::from_column_slice(s);
        acc += y.norm_squared() - 2.0 * y.dot(&ase) + (a * so * a.transpose()).trace();
    }
    acc
}

/// sigma0^2 (using the already-updated A), diagonal D, and tau^2 (using the
/// already-updated fixed effects in `theta`).
pub fn mstep_variances(moments: &PosteriorMoments, ds: &LongitudinalDataset, theta: &ModelParams) -> Result<VarianceUpdate> {
    let first = moments
        .voxels
        .first()
        .ok_or_else(|| LicaError::Argument("no voxels in posterior moments".into()))?;
    let (q, n, kv) = (first.q, first.n_subjects, first.n_visits);
    let nv = moments.voxels.len();
    let denom = (n * kv * nv * q) as f64;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut dsum = vec![0.0; q];
    for (v, mv) in moments.voxels.iter().enumerate() {
        s1 += level1_residual(mv, ds, &theta.mixing, v);
        s2 += level2_residual(mv, theta, &ds.covariates, v);
        for i in 0..n {
            for l in 0..q {
                dsum[l] += mv.e_b_outer[i * q * q + l * q + l];
            }
        }
    }
    Ok(VarianceUpdate {
        sigma0_sq: floor_variance("sigma0^2", s1 / denom),
        d: dsum.iter().enumerate().map(|(l, s)| floor_variance(&format!("D[{l}]"), s / (n * nv) as f64)).collect(),
        tau_sq: floor_variance("tau^2", s2 / denom),
    })
}

/// pi, mu, sigma^2 per IC from the per-IC marginals, then floors and
/// reorders components so the background (smallest |mu|) comes first.
pub fn mstep_mog(moments: &PosteriorMoments) -> Result<MogParams> {
    let first = moments
        .voxels
        .first()
        .ok_or_else(|| LicaError::Argument("no voxels in posterior moments".into()))?;
    let (q, m) = (first.marginals.q, first.marginals.m);
    let nv = moments.voxels.len() as f64;
    let mut ics = Vec::with_capacity(q);
    for l in 0..q {
        let mut w = vec![0.0; m];
        let mut s1 = vec![0.0; m];
        let mut s2 = vec![0.0; m];
        for mv in &moments.voxels {
            for k in 0..m {
                let p = mv.marginals.prob(l, k);
                w[k] += p;
                s1[k] += p * mv.marginals.mean(l, k);
                s2[k] += p * mv.marginals.sq(l, k);
            }
        }
        let mut ic = IcMixture { weights: vec![0.0; m], means: vec![0.0; m], variances: vec![0.0; m] };
        for k in 0..m {
            let pi = w[k] / nv;
            if !(pi > 0.0) {
                return Err(LicaError::ComponentCollapse { ic: l, component: k });
            }
            let mu = s1[k] / w[k];
            ic.weights[k] = pi;
            ic.means[k] = mu;
            ic.variances[k] = floor_variance(&format!("sigma^2[{l},{k}]"), s2[k] / w[k] - mu * mu);
        }
        ic.sort_background_first();
        ics.push(ic);
    }
    Ok(MogParams { ics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::estep::VoxelMoments;

    fn set_diag(data: &mut [f64], idx: usize, q: usize, c: f64) {
        for l in 0..q {
            data[idx * q * q + l * q + l] = c;
        }
    }

    #[test]
    fn intercept_only_update_is_mean() {
        // p = 0: alpha_j is the subject mean of E[s_ij - s_0 - b_i].
        let (q, n, k) = (2, 3, 2);
        let mut mv = VoxelMoments::zeros(q, n, k, 1, 1);
        mv.e_s0 = vec![0.5, -1.0];
        for i in 0..n {
            mv.e_b[i * q] = i as f64 * 0.1;
            for j in 0..k {
                mv.e_s[(i * k + j) * q] = 2.0 + i as f64 + j as f64;
                mv.e_s[(i * k + j) * q + 1] = -3.0 * i as f64;
            }
        }
        let pm = PosteriorMoments { voxels: vec![mv.clone()] };
        let (alpha, beta) = mstep_fixed_effects(&pm, &DMatrix::zeros(n, 0)).unwrap();
        for l in 0..q {
            let want: f64 = (0..n).map(|i| mv.s(i, 1)[l] - mv.e_s0[l] - mv.b(i)[l]).sum::<f64>() / n as f64;
            assert!((alpha[1][(l, 0)] - want).abs() < 1e-12);
            assert_eq!(alpha[0][(l, 0)], 0.0);
        }
        assert_eq!(beta[1].nrows(), 0);
    }

    #[test]
    fn balanced_covariate_decouples() {
        let (q, n, k) = (1, 4, 2);
        let x = DMatrix::from_column_slice(n, 1, &[1.0, -1.0, 1.0, -1.0]);
        let mut mv = VoxelMoments::zeros(q, n, k, 1, 1);
        let t = [3.0, 1.0, 5.0, -1.0];
        for i in 0..n {
            mv.e_s[i * k + 1] = t[i];
        }
        let pm = PosteriorMoments { voxels: vec![mv] };
        let (alpha, beta) = mstep_fixed_effects(&pm, &x).unwrap();
        assert!((alpha[1][(0, 0)] - 2.0).abs() < 1e-12);
        let slope = (3.0 - 1.0 + 5.0 + 1.0) / 4.0;
        assert!((beta[1][(0, 0)] - slope).abs() < 1e-12);
    }

    #[test]
    fn collinear_design_names_columns() {
        let x = DMatrix::from_fn(5, 2, |i, c| if c == 0 { i as f64 } else { 2.0 * i as f64 });
        let err = design_gram_inverse(&x, 1).unwrap_err().to_string();
        assert!(err.contains("covariate 0") && err.contains("covariate 1"), "{err}");
        let ones = DMatrix::from_element(4, 1, 1.0);
        let err = design_gram_inverse(&ones, 1).unwrap_err().to_string();
        assert!(err.contains("intercept"), "{err}");
    }

    #[test]
    fn polar_fixed_point_and_scaling() {
        let r = DMatrix::from_row_slice(2, 2, &[0.6, -0.8, 0.8, 0.6]);
        assert!((orthogonalize(&r).unwrap() - &r).amax() < 1e-12);
        let two = DMatrix::<f64>::identity(3, 3) * 2.0;
        assert!((orthogonalize(&two).unwrap() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn polar_beats_every_2x2_orthogonal_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[1.3, -0.4, 0.9, 0.2]);
        let h = orthogonalize(&a).unwrap();
        let best = (&h - &a).norm();
        let steps = 20_000;
        let mut brute = f64::INFINITY;
        for s in 0..steps {
            let t = 2.0 * std::f64::consts::PI * s as f64 / steps as f64;
            let (c, sn) = (t.cos(), t.sin());
            let rot = DMatrix::from_row_slice(2, 2, &[c, -sn, sn, c]);
            let refl = DMatrix::from_row_slice(2, 2, &[c, sn, sn, -c]);
            brute = brute.min((rot - &a).norm()).min((refl - &a).norm());
        }
        assert!(best <= brute + 1e-12);
        assert!(brute - best < 1e-6);
    }

    #[test]
    fn constant_b_second_moment_gives_d() {
        let (q, n, k) = (2, 3, 1);
        let c = 0.7;
        let voxels: Vec<VoxelMoments> = (0..4)
            .map(|_| {
                let mut mv = VoxelMoments::zeros(q, n, k, 1, 1);
                for i in 0..n {
                    set_diag(&mut mv.e_b_outer, i, q, c);
                }
                mv
            })
            .collect();
        let pm = PosteriorMoments { voxels };
        let ds = LongitudinalDataset::new(n, k, q, vec![DMatrix::zeros(q, 4); n * k], DMatrix::zeros(n, 0)).unwrap();
        let theta = ModelParams {
            alpha: vec![DMatrix::zeros(q, 4)],
            beta: vec![DMatrix::zeros(0, 4)],
            mixing: vec![DMatrix::identity(q, q); n * k],
            sigma0_sq: 1.0,
            d: vec![1.0; q],
            tau_sq: 1.0,
            mog: MogParams { ics: vec![IcMixture { weights: vec![1.0], means: vec![0.0], variances: vec![1.0] }; q] },
        };
        let up = mstep_variances(&pm, &ds, &theta).unwrap();
        assert!(up.d.iter().all(|&d| (d - c).abs() < 1e-14));
        // Zero data and zero moments: both residual variances hit the floor.
        assert_eq!(up.sigma0_sq, VARIANCE_FLOOR);
    }

    #[test]
    fn mixing_weights_average_posteriors() {
        let mk = |p: f64| {
            let mut mv = VoxelMoments::zeros(1, 1, 1, 2, 2);
            mv.marginals.prob = vec![1.0 - p, p];
            mv.marginals.mean = vec![0.0, 3.0];
            mv.marginals.sq = vec![0.5, 10.0];
            mv
        };
        let pm = PosteriorMoments { voxels: vec![mk(0.2), mk(0.6)] };
        let mog = mstep_mog(&pm).unwrap();
        assert!((mog.ics[0].weights[1] - 0.4).abs() < 1e-15);
        assert!((mog.ics[0].weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let pm = PosteriorMoments { voxels: vec![mk(0.5), mk(0.5)] };
        assert!(mstep_mog(&pm).unwrap().ics[0].weights.iter().all(|&w| (w - 0.5).abs() < 1e-15));
        let pm = PosteriorMoments { voxels: vec![mk(0.0)] };
        assert!(matches!(mstep_mog(&pm), Err(LicaError::ComponentCollapse { ic: 0, component: 1 })));
    }
}
