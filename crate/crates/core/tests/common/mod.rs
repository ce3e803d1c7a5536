//! Oracles shared by the integration-test targets.
#![allow(dead_code)]

use lica::em::dense::DenseSystem;
use lica::em::{estep_voxel, fit_from, mstep_all, q_function, FitConfig, MixingUpdate, PatternCache, VoxelMoments};
use lica::em::estep_all;
use lica::inference::{infer, InferenceOptions};
use lica::patterns::{enumerate_patterns, realize_pattern, PatternMode};
use lica::simgen::{random_covariates, random_instance, random_params, sample_from_model, Dims};
use lica::{Contrast, LongitudinalDataset, ModelParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const TINY: Dims = Dims { q: 2, m: 2, n: 2, k: 2, p: 1, v: 10 };

/// Every moment of a voxel in one flat vector, in a fixed order.
pub fn flatten_moments(vm: &VoxelMoments) -> Vec<f64> {
    [
        &vm.pattern_post,
        &vm.e_s0,
        &vm.e_s0_outer,
        &vm.e_b,
        &vm.e_b_outer,
        &vm.e_b_s0,
        &vm.e_s,
        &vm.e_s_outer,
        &vm.e_s0_s,
        &vm.e_b_s,
    ]
    .iter()
    .flat_map(|v| v.iter().copied())
    .collect()
}

/// Same layout as `flatten_moments` from pattern posteriors and the first
/// and second moments of L = [b; s_0; s_11 .. s_NK].
fn flatten_dense(post: &[f64], mean: &DVector<f64>, second: &DMatrix<f64>, q: usize, n: usize, k: usize) -> Vec<f64> {
    let nk = n * k;
    let s0 = n * q;
    let s_at = |ij: usize| n * q + q + ij * q;
    let block = |r0: usize, c0: usize| -> Vec<f64> {
        let mut out = vec![0.0; q * q];
        for c in 0..q {
            for r in 0..q {
                out[c * q + r] = second[(r0 + r, c0 + c)];
            }
        }
        out
    };
    let mut out = post.to_vec();
    out.extend(mean.rows(s0, q).iter());
    out.extend(block(s0, s0));
    out.extend(mean.rows(0, n * q).iter());
    for i in 0..n {
        out.extend(block(i * q, i * q));
    }
    for i in 0..n {
        out.extend(block(i * q, s0));
    }
    out.extend(mean.rows(s0 + q, nk * q).iter());
    for ij in 0..nk {
        out.extend(block(s_at(ij), s_at(ij)));
    }
    for ij in 0..nk {
        out.extend(block(s0, s_at(ij)));
    }
    for ij in 0..nk {
        out.extend(block(ij / k * q, s_at(ij)));
    }
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Empirical joint moments of the zero-mean deviations (L - E L, y - E y)
/// under one latent pattern.
struct JointSample {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn sample_joint(theta: &ModelParams, sigma_z: &[f64], draws: usize, rng: &mut ChaCha8Rng) -> JointSample {
    let (q, n, k) = (theta.q(), theta.n_subjects(), theta.n_visits());
    let nk = n * k;
    let dl = n * q + q + nk * q;
    let dim = dl + nk * q;
    let mut sum = DVector::zeros(dim);
    let mut outer = DMatrix::zeros(dim, dim);
    let mut x = DVector::zeros(dim);
    for _ in 0..draws {
        let psi: Vec<f64> = (0..q).map(|l| sigma_z[l].sqrt() * normal(rng)).collect();
        for i in 0..n {
            for l in 0..q {
                x[i * q + l] = theta.d[l].sqrt() * normal(rng);
            }
        }
        for l in 0..q {
            x[n * q + l] = psi[l];
        }
        for ij in 0..nk {
            let i = ij / k;
            let mut s = DVector::zeros(q);
            for l in 0..q {
                s[l] = psi[l] + x[i * q + l] + theta.tau_sq.sqrt() * normal(rng);
                x[n * q + q + ij * q + l] = s[l];
            }
            let y = &theta.mixing[ij] * s;
            for r in 0..q {
                x[dl + ij * q + r] = y[r] + theta.sigma0_sq.sqrt() * normal(rng);
            }
        }
        sum += &x;
        outer.ger(1.0, &x, &x, 1.0);
    }
    let mean = sum / draws as f64;
    let cov = (outer - &mean * mean.transpose() * draws as f64) / (draws as f64 - 1.0);
    JointSample { mean, cov }
}

/// Moments at every voxel from one batch of forward draws, conditioned on
/// y empirically and mixed over the exact pattern space.
fn batch_moments(ds: &LongitudinalDataset, theta: &ModelParams, skeletons: &[Vec<usize>], draws: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let (q, n, k) = (theta.q(), theta.n_subjects(), theta.n_visits());
    let nk = n * k;
    let dl = n * q + q + nk * q;
    let dy = nk * q;
    let joints: Vec<(Vec<usize>, JointSample)> = skeletons
        .iter()
        .map(|z| {
            let p = realize_pattern(z, &theta.mog);
            (z.clone(), sample_joint(theta, &p.sigma_z, draws, rng))
        })
        .collect();
    let sys = DenseSystem::new(theta);
    (0..ds.n_voxels())
        .map(|v| {
            let y = DVector::from_vec(ds.voxel(v));
            let fixed = sys.fixed_mean(theta, &ds.covariates, v);
            let mut logw = Vec::new();
            let mut cond = Vec::new();
            for (z, js) in &joints {
                let p = realize_pattern(z, &theta.mog);
                let mu = DVector::from_column_slice(&p.mu_z);
                let mut shift_l = DVector::zeros(dl);
                for l in 0..q {
                    shift_l[n * q + l] = mu[l];
                }
                for ij in 0..nk {
                    for l in 0..q {
                        shift_l[n * q + q + ij * q + l] = mu[l] + fixed[ij * q + l];
                    }
                }
                let mut shift_y = DVector::zeros(dy);
                for ij in 0..nk {
                    let s = shift_l.rows(n * q + q + ij * q, q).into_owned();
                    shift_y.rows_mut(ij * q, q).copy_from(&(&theta.mixing[ij] * s));
                }
                let m_l = js.mean.rows(0, dl) + &shift_l;
                let m_y = js.mean.rows(dl, dy) + &shift_y;
                let s_ll = js.cov.view((0, 0), (dl, dl)).into_owned();
                let s_ly = js.cov.view((0, dl), (dl, dy)).into_owned();
                let s_yy = js.cov.view((dl, dl), (dy, dy)).into_owned();
                let chol = s_yy.clone().cholesky().expect("empirical covariance is PD");
                let resid = &y - &m_y;
                let gain_t = chol.solve(&s_ly.transpose());
                let mean = m_l + gain_t.transpose() * &resid;
                let cov = s_ll - &s_ly * &gain_t;
                let ll = lica::linalg::mvn_log_density(&y, &m_y, &s_yy).unwrap();
                logw.push(p.prior_log + ll);
                cond.push((mean, cov));
            }
            let lse = lica::linalg::log_sum_exp(&logw);
            let post: Vec<f64> = logw.iter().map(|w| (w - lse).exp()).collect();
            let mut mean = DVector::zeros(dl);
            let mut second = DMatrix::zeros(dl, dl);
            for (r, (m, c)) in cond.iter().enumerate() {
                mean += post[r] * m;
                second += post[r] * (c + m * m.transpose());
            }
            flatten_dense(&post, &mean, &second, q, n, k)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct McSummary {
    pub compared: usize,
    pub within_3se: usize,
    pub max_abs_z: f64,
}

impl McSummary {
    pub fn fraction_within(&self) -> f64 {
        self.within_3se as f64 / self.compared as f64
    }
}

/// Structured E-step moments against batch means of the forward-sampling
/// oracle on the tiny instance.
pub fn estep_mc_oracle(seed: u64, batches: usize, draws: usize) -> McSummary {
    let (ds, theta) = random_instance(TINY, seed).unwrap();
    let skeletons = enumerate_patterns(TINY.q, TINY.m, PatternMode::Exact, u64::MAX).unwrap();
    let cache = PatternCache::build(&theta, &skeletons).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let per_batch: Vec<Vec<Vec<f64>>> = (0..batches).map(|_| batch_moments(&ds, &theta, &skeletons, draws, &mut rng)).collect();
    let mut summary = McSummary { compared: 0, within_3se: 0, max_abs_z: 0.0 };
    for v in 0..ds.n_voxels() {
        let structured = flatten_moments(&estep_voxel(&ds.voxel(v), v, &theta, &ds.covariates, &cache).unwrap());
        for e in 0..structured.len() {
            let xs: Vec<f64> = per_batch.iter().map(|b| b[v][e]).collect();
            let mean = xs.iter().sum::<f64>() / batches as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (batches as f64 - 1.0);
            let se = (var / batches as f64).sqrt();
            let diff = (structured[e] - mean).abs();
            if se < 1e-12 && diff < 1e-9 {
                continue;
            }
            let z = diff / se.max(1e-300);
            summary.compared += 1;
            if z <= 3.0 {
                summary.within_3se += 1;
            }
            summary.max_abs_z = summary.max_abs_z.max(z);
        }
    }
    summary
}

/// Largest |Sigma_{r|y}(structured) - Sigma_{r|y}(dense)| over patterns.
pub fn sigma_r_gap(theta: &ModelParams, mode: PatternMode) -> f64 {
    let skeletons = enumerate_patterns(theta.q(), theta.mog.m(), mode, u64::MAX).unwrap();
    let cache = PatternCache::build(theta, &skeletons).unwrap();
    let sys = DenseSystem::new(theta);
    (0..skeletons.len())
        .map(|r| {
            let p = realize_pattern(&skeletons[r], &theta.mog);
            (cache.sigma_r_given_y(r) - sys.sigma_r_given_y(theta, &p).unwrap()).amax()
        })
        .fold(0.0, f64::max)
}

pub fn small_dims(seed: u64) -> Dims {
    Dims { q: 2 + (seed % 2) as usize, m: 2 + (seed / 2 % 2) as usize, n: 3, k: 2 + seed.is_multiple_of(3) as usize, p: 1 + (seed % 2) as usize, v: 15 }
}

/// Log-likelihood trace of exact EM from a random start, run for exactly
/// `iters` iterations.
pub fn em_trace(seed: u64, iters: usize) -> Vec<f64> {
    let dims = small_dims(seed);
    let (ds, _) = random_instance(dims, 1000 + seed).unwrap();
    let start = random_params(dims, 5000 + seed);
    let cfg = FitConfig { mode: PatternMode::Exact, epsilon: f64::MIN_POSITIVE, max_iters: iters, ..FitConfig::default() };
    fit_from(&ds, &cfg, start).unwrap().loglik_trace
}

/// Largest relative decrease between consecutive entries (0 when monotone).
pub fn worst_decrease(trace: &[f64]) -> f64 {
    trace
        .windows(2)
        .map(|w| ((w[0] - w[1]) / w[0].abs().max(1.0)).max(0.0))
        .fold(0.0, f64::max)
}

/// Directions in parameter space at which Q is probed.
#[derive(Debug, Clone, Copy)]
pub enum Coord {
    Alpha { j: usize, l: usize, v: usize },
    Beta { j: usize, r: usize, v: usize },
    Sigma0,
    Tau,
    D(usize),
    Mu(usize, usize),
    Var(usize, usize),
    /// Mass moved from component b to component a of IC l.
    Pi { l: usize, a: usize, b: usize },
    /// Cayley rotation of A_ij in the (a, b) plane.
    Mixing { ij: usize, a: usize, b: usize },
}

impl Coord {
    pub fn group(&self) -> &'static str {
        match self {
            Coord::Alpha { .. } | Coord::Beta { .. } => "C_j",
            Coord::Sigma0 => "sigma0^2",
            Coord::Tau => "tau^2",
            Coord::D(_) => "D",
            Coord::Mu(..) => "mu",
            Coord::Var(..) => "sigma^2",
            Coord::Pi { .. } => "pi",
            Coord::Mixing { .. } => "A_ij",
        }
    }

    fn value(&self, t: &ModelParams) -> f64 {
        match *self {
            Coord::Alpha { j, l, v } => t.alpha[j][(l, v)],
            Coord::Beta { j, r, v } => t.beta[j][(r, v)],
            Coord::Sigma0 => t.sigma0_sq,
            Coord::Tau => t.tau_sq,
            Coord::D(l) => t.d[l],
            Coord::Mu(l, k) => t.mog.ics[l].means[k],
            Coord::Var(l, k) => t.mog.ics[l].variances[k],
            Coord::Pi { .. } | Coord::Mixing { .. } => 0.0,
        }
    }

    pub fn step(&self, t: &ModelParams, h: f64) -> ModelParams {
        let mut o = t.clone();
        match *self {
            Coord::Alpha { j, l, v } => o.alpha[j][(l, v)] += h,
            Coord::Beta { j, r, v } => o.beta[j][(r, v)] += h,
            Coord::Sigma0 => o.sigma0_sq += h,
            Coord::Tau => o.tau_sq += h,
            Coord::D(l) => o.d[l] += h,
            Coord::Mu(l, k) => o.mog.ics[l].means[k] += h,
            Coord::Var(l, k) => o.mog.ics[l].variances[k] += h,
            Coord::Pi { l, a, b } => {
                o.mog.ics[l].weights[a] += h;
                o.mog.ics[l].weights[b] -= h;
            }
            Coord::Mixing { ij, a, b } => {
                let q = t.q();
                let mut s = DMatrix::zeros(q, q);
                s[(a, b)] = h;
                s[(b, a)] = -h;
                let eye = DMatrix::<f64>::identity(q, q);
                let cayley = (&eye - &s * 0.5).try_inverse().unwrap() * (&eye + &s * 0.5);
                o.mixing[ij] = &t.mixing[ij] * cayley;
            }
        }
        o
    }

    /// Scale of the coordinate for the scaled-gradient criterion.
    pub fn scale(&self, t: &ModelParams) -> f64 {
        self.value(t).abs().max(1.0)
    }
}

pub fn all_coords(t: &ModelParams) -> Vec<Coord> {
    let (q, k, p, nv, m) = (t.q(), t.n_visits(), t.n_covariates(), t.n_voxels(), t.mog.m());
    let mut out = Vec::new();
    for v in 0..nv {
        for j in 0..k {
            for l in 0..q {
                if j > 0 {
                    out.push(Coord::Alpha { j, l, v });
                }
                for c in 0..p {
                    out.push(Coord::Beta { j, r: c * q + l, v });
                }
            }
        }
    }
    out.push(Coord::Sigma0);
    out.push(Coord::Tau);
    for l in 0..q {
        out.push(Coord::D(l));
        for kk in 0..m {
            out.push(Coord::Mu(l, kk));
            out.push(Coord::Var(l, kk));
            for b in 0..m {
                if b != kk {
                    out.push(Coord::Pi { l, a: kk, b });
                }
            }
        }
    }
    for ij in 0..t.mixing.len() {
        for a in 0..q {
            for b in a + 1..q {
                out.push(Coord::Mixing { ij, a, b });
            }
        }
    }
    out
}

pub struct MstepCheck {
    /// Largest scaled central-difference gradient of Q per parameter group.
    pub worst: Vec<(&'static str, f64)>,
    pub q_before: f64,
    pub q_after: f64,
    /// Largest relative amount by which a golden-section maximization of Q
    /// along a variance coordinate beats the closed-form update.
    pub golden_excess: f64,
}

/// Maximizes a unimodal function on [lo, hi].
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol * (lo.abs() + hi.abs()).max(1e-300) {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}

/// The M-step lists MoG components background first; Q pairs component k
/// with the posterior of state k, so undo any reordering before probing.
fn align_mog_to_moments(theta: &mut ModelParams, moments: &lica::PosteriorMoments) {
    let nv = moments.voxels.len() as f64;
    for (l, ic) in theta.mog.ics.iter_mut().enumerate() {
        let m = ic.m();
        let old = ic.clone();
        for k in 0..m {
            let w: f64 = moments.voxels.iter().map(|mv| mv.marginals.prob(l, k)).sum::<f64>() / nv;
            let src = (0..m)
                .min_by(|&a, &b| (old.weights[a] - w).abs().total_cmp(&(old.weights[b] - w).abs()))
                .unwrap();
            ic.weights[k] = old.weights[src];
            ic.means[k] = old.means[src];
            ic.variances[k] = old.variances[src];
        }
    }
}

/// Stationarity of Q at the closed-form M-step on one random instance.
pub fn mstep_optimality(seed: u64) -> MstepCheck {
    let dims = small_dims(seed);
    let (ds, _) = random_instance(dims, 200 + seed).unwrap();
    let theta = random_params(dims, 700 + seed);
    let skeletons = enumerate_patterns(dims.q, dims.m, PatternMode::Exact, u64::MAX).unwrap();
    let cache = PatternCache::build(&theta, &skeletons).unwrap();
    let (moments, _) = estep_all(&ds, &theta, &cache).unwrap();
    let mut next = mstep_all(&moments, &ds, &theta, MixingUpdate::CrossMoment).unwrap();
    align_mog_to_moments(&mut next, &moments);
    let q = |t: &ModelParams| q_function(t, &moments, &ds);
    let q0 = q(&next);
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for c in all_coords(&next) {
        let h = match c {
            Coord::Pi { l, a, b } => 1e-5 * next.mog.ics[l].weights[a].min(next.mog.ics[l].weights[b]),
            _ => 1e-5 * c.scale(&next),
        };
        let g = (q(&c.step(&next, h)) - q(&c.step(&next, -h))) / (2.0 * h);
        let scaled = g.abs() * c.scale(&next) / q0.abs().max(1.0);
        match worst.iter_mut().find(|(n, _)| *n == c.group()) {
            Some(w) => w.1 = w.1.max(scaled),
            None => worst.push((c.group(), scaled)),
        }
    }
    let mut golden_excess = 0.0f64;
    let mut variance_coords = vec![Coord::Sigma0, Coord::Tau];
    for l in 0..dims.q {
        variance_coords.push(Coord::D(l));
        for k in 0..dims.m {
            variance_coords.push(Coord::Var(l, k));
        }
    }
    for c in variance_coords {
        let x = c.value(&next);
        let best = golden_section(|s| q(&c.step(&next, s - x)), x * 0.2, x * 5.0, 1e-12);
        golden_excess = golden_excess.max((q(&c.step(&next, best - x)) - q0) / q0.abs().max(1.0));
    }
    MstepCheck { worst, q_before: q(&theta), q_after: q0, golden_excess }
}

pub struct VarianceMc {
    /// Largest |empirical - plug-in| over alpha/beta entries of Var(C*),
    /// relative to the plug-in standard deviations of the two slots.
    pub worst_entry: f64,
    /// Largest |empirical / plug-in - 1| over the diagonal.
    pub worst_diagonal: f64,
    pub reps: usize,
}

/// Monte-Carlo covariance of C*(v) against the plug-in estimator, with
/// EM started at the truth in every replicate.
pub fn variance_mc(reps: usize, seed: u64, nv: usize, epsilon: f64) -> VarianceMc {
    let dims = Dims { q: 2, m: 2, n: 30, k: 2, p: 1, v: nv };
    let mut theta = random_params(dims, seed);
    for ic in &mut theta.mog.ics {
        ic.variances = vec![0.05, 0.3];
    }
    theta.sigma0_sq = 1.0;
    theta.tau_sq = 0.5;
    let cov = random_covariates(dims.n, dims.p, seed + 1);
    let dim = Contrast::stacked_dim(dims.q, dims.k, dims.p);
    let cfg = FitConfig { mode: PatternMode::Exact, epsilon, max_iters: 3000, ..FitConfig::default() };
    let mut ests: Vec<DMatrix<f64>> = Vec::with_capacity(reps);
    let mut plug = vec![DMatrix::zeros(dim, dim); dims.v];
    for r in 0..reps {
        let (ds, _) = sample_from_model(&theta, &cov, seed * 1_000_003 + r as u64).unwrap();
        let f = fit_from(&ds, &cfg, theta.clone()).unwrap();
        if std::env::var("LICA_DEBUG_MC").is_ok() && r < 3 {
            eprintln!("rep {r}: {} iterations", f.iterations);
        }
        let res = infer(&f.theta, &f.moments, &cov, &[], InferenceOptions::default()).unwrap();
        for v in 0..dims.v {
            plug[v] += &res.variances[v] / reps as f64;
        }
        ests.push(res.estimates);
    }
    let slots: Vec<usize> = (dims.q..dim).collect();
    let mut emp_avg = DMatrix::zeros(dim, dim);
    let mut plug_avg = DMatrix::zeros(dim, dim);
    for v in 0..dims.v {
        let mean: DVector<f64> = ests.iter().map(|e| e.column(v).into_owned()).sum::<DVector<f64>>() / reps as f64;
        let mut emp = DMatrix::zeros(dim, dim);
        for e in &ests {
            let d = e.column(v) - &mean;
            emp += &d * d.transpose();
        }
        emp /= reps as f64 - 1.0;
        emp_avg += emp / dims.v as f64;
        plug_avg += &plug[v] / dims.v as f64;
    }
    let mut worst_entry = 0.0f64;
    let mut worst_diagonal = 0.0f64;
    for &a in &slots {
        for &b in &slots {
            let denom = (plug_avg[(a, a)] * plug_avg[(b, b)]).sqrt();
            worst_entry = worst_entry.max((emp_avg[(a, b)] - plug_avg[(a, b)]).abs() / denom);
        }
        worst_diagonal = worst_diagonal.max((emp_avg[(a, a)] / plug_avg[(a, a)] - 1.0).abs());
    }
    if std::env::var("LICA_DEBUG_MC").is_ok() {
        eprintln!("emp diag {:?}", slots.iter().map(|&a| emp_avg[(a, a)]).collect::<Vec<_>>());
        eprintln!("plug diag {:?}", slots.iter().map(|&a| plug_avg[(a, a)]).collect::<Vec<_>>());
    }
    VarianceMc { worst_entry, worst_diagonal, reps }
}
