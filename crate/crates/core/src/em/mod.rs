//! Maximum-likelihood estimation by exact or subspace EM.

pub mod dense;
pub mod estep;
pub mod ica;
pub mod init;
pub mod mstep;
pub mod qfunc;

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::datamodel::{validate, Container, IcMixture, LongitudinalDataset, ModelParams, MogParams};
use crate::error::{LicaError, Result};
use crate::patterns::{enumerate_patterns, PatternMode, DEFAULT_PATTERN_BUDGET};

pub use estep::{estep_voxel, marginal_ic_moments, IcMarginals, PatternCache, VoxelMoments};
pub use init::{initialize, InitConfig};
pub use mstep::{mstep_fixed_effects, mstep_mixing, mstep_mog, mstep_variances, MixingUpdate, VarianceUpdate};
pub use qfunc::q_function;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub mode: PatternMode,
    /// Expected IC count; 0 takes it from the data.
    pub q: usize,
    pub m: usize,
    pub epsilon: f64,
    pub max_iters: usize,
    pub pattern_budget: u64,
    /// Permit exact mode beyond the pattern budget.
    pub allow_over_budget: bool,
    /// Worker threads; 0 uses the ambient rayon pool.
    pub workers: usize,
    pub mixing_update: MixingUpdate,
    pub init: InitConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            mode: PatternMode::Exact,
            q: 0,
            m: 2,
            epsilon: 1e-4,
            max_iters: 500,
            pattern_budget: DEFAULT_PATTERN_BUDGET,
            allow_over_budget: false,
            workers: 0,
            mixing_update: MixingUpdate::CrossMoment,
            init: InitConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn effective_budget(&self) -> u64 {
        if self.allow_over_budget {
            u64::MAX
        } else {
            self.pattern_budget
        }
    }
}

/// Posterior moments for every voxel, in voxel order.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMoments {
    pub voxels: Vec<VoxelMoments>,
}

impl PosteriorMoments {
    /// q x V matrix of E[s_0(v) | y].
    pub fn s0_map(&self) -> DMatrix<f64> {
        let q = self.voxels.first().map_or(0, |m| m.q);
        DMatrix::from_fn(q, self.voxels.len(), |l, v| self.voxels[v].e_s0[l])
    }

    /// q x V matrix of E[s_ij(v) | y].
    pub fn sij_map(&self, i: usize, j: usize) -> DMatrix<f64> {
        let q = self.voxels.first().map_or(0, |m| m.q);
        DMatrix::from_fn(q, self.voxels.len(), |l, v| self.voxels[v].s(i, j)[l])
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: ModelParams,
    pub initial: ModelParams,
    pub moments: PosteriorMoments,
    /// Observed-data log-likelihood at Theta^0, Theta^1, ..., final. In
    /// subspace mode the sum runs over the subspace only.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub mode: PatternMode,
    pub iteration_seconds: Vec<f64>,
}

/// ||a - b|| / ||b|| over concatenated parameter vectors.
pub fn relative_change(new: &ModelParams, old: &ModelParams) -> f64 {
    let a = new.flatten();
    let b = old.flatten();
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm
}

/// E-step over all voxels; returns the moments and the summed log-likelihood.
pub fn estep_all(ds: &LongitudinalDataset, theta: &ModelParams, cache: &PatternCache) -> Result<(PosteriorMoments, f64)> {
    let per: Vec<(VoxelMoments, f64)> = (0..ds.n_voxels())
        .into_par_iter()
        .map(|v| {
            let y = ds.voxel(v);
            let t = cache.voxel_tables(&y, v, theta, &ds.covariates);
            let ll = cache.voxel_loglik(&t)?;
            let mm = estep::moments_from_tables(cache, &t)
                .map_err(|e| LicaError::Numeric(format!("voxel {v}: {e}")))?;
            Ok((mm, ll))
        })
        .collect::<Result<_>>()?;
    let mut loglik = 0.0;
    let mut voxels = Vec::with_capacity(per.len());
    for (mm, ll) in per {
        loglik += ll;
        voxels.push(mm);
    }
    Ok((PosteriorMoments { voxels }, loglik))
}

/// Observed-data log-likelihood over the given pattern set.
pub fn observed_loglik(ds: &LongitudinalDataset, theta: &ModelParams, patterns: &[Vec<usize>]) -> Result<f64> {
    let cache = PatternCache::build(theta, patterns)?;
    let lls: Vec<f64> = (0..ds.n_voxels())
        .into_par_iter()
        .map(|v| {
            let t = cache.voxel_tables(&ds.voxel(v), v, theta, &ds.covariates);
            cache.voxel_loglik(&t)
        })
        .collect::<Result<_>>()?;
    Ok(lls.iter().sum())
}

/// One full M-step: fixed effects, mixing, variances (using the new A and
/// fixed effects), then MoG.
pub fn mstep_all(
    moments: &PosteriorMoments,
    ds: &LongitudinalDataset,
    theta: &ModelParams,
    update: MixingUpdate,
) -> Result<ModelParams> {
    let (alpha, beta) = mstep_fixed_effects(moments, &ds.covariates)?;
    let mixing = mstep_mixing(moments, ds, update)?;
    let mut next = ModelParams { alpha, beta, mixing, ..theta.clone() };
    let var = mstep_variances(moments, ds, &next)?;
    next.sigma0_sq = var.sigma0_sq;
    next.d = var.d;
    next.tau_sq = var.tau_sq;
    next.mog = mstep_mog(moments)?;
    Ok(next)
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| LicaError::Config(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn at(iteration: usize, context: &'static str) -> impl FnOnce(LicaError) -> LicaError {
    move |e| LicaError::AtIteration { iteration, context, source: Box::new(e) }
}

/// EM from the internal initialization.
pub fn fit(ds: &LongitudinalDataset, cfg: &FitConfig, seed: u64) -> Result<FitResult> {
    check_inputs(ds, cfg)?;
    let theta0 = with_pool(cfg.workers, || initialize(ds, cfg, seed))??;
    fit_from(ds, cfg, theta0)
}

fn check_inputs(ds: &LongitudinalDataset, cfg: &FitConfig) -> Result<()> {
    let violations = validate(ds);
    if let Some(v) = violations.first() {
        return Err(LicaError::Argument(format!("invalid dataset ({} violations, first: {v})", violations.len())));
    }
    if cfg.q != 0 && cfg.q != ds.q() {
        return Err(LicaError::Argument(format!("config q = {} but data have {} rows per block", cfg.q, ds.q())));
    }
    if cfg.m < 1 {
        return Err(LicaError::Argument("m must be at least 1".into()));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(LicaError::Argument("epsilon must be positive".into()));
    }
    Ok(())
}

/// EM from a supplied starting value.
pub fn fit_from(ds: &LongitudinalDataset, cfg: &FitConfig, theta0: ModelParams) -> Result<FitResult> {
    check_inputs(ds, cfg)?;
    with_pool(cfg.workers, || run_em(ds, cfg, theta0))?
}

fn run_em(ds: &LongitudinalDataset, cfg: &FitConfig, theta0: ModelParams) -> Result<FitResult> {
    let patterns = enumerate_patterns(ds.q(), theta0.mog.m(), cfg.mode, cfg.effective_budget())?;
    let mut theta = theta0.clone();
    let mut trace = Vec::new();
    let mut seconds = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        let start = Instant::now();
        let cache = PatternCache::build(&theta, &patterns).map_err(at(it, "building pattern cache"))?;
        let (moments, ll) = estep_all(ds, &theta, &cache).map_err(at(it, "E-step"))?;
        trace.push(ll);
        let next = mstep_all(&moments, ds, &theta, cfg.mixing_update).map_err(at(it, "M-step"))?;
        let change = relative_change(&next, &theta);
        theta = next;
        seconds.push(start.elapsed().as_secs_f64());
        iterations = it;
        log::debug!("iteration {it}: loglik {ll:.6}, relative change {change:.3e}");
        if change < cfg.epsilon {
            converged = true;
            break;
        }
    }
    let cache = PatternCache::build(&theta, &patterns).map_err(at(iterations + 1, "building pattern cache"))?;
    let (moments, ll) = estep_all(ds, &theta, &cache).map_err(at(iterations + 1, "final E-step"))?;
    trace.push(ll);
    if !converged {
        log::warn!("EM stopped at max_iters = {} without meeting epsilon = {}", cfg.max_iters, cfg.epsilon);
    }
    Ok(FitResult {
        theta,
        initial: theta0,
        moments,
        loglik_trace: trace,
        iterations,
        converged,
        mode: cfg.mode,
        iteration_seconds: seconds,
    })
}

/// Writes Theta into named container entries.
pub fn theta_to_container(theta: &ModelParams, c: &mut Container) {
    for (j, a) in theta.alpha.iter().enumerate() {
        c.push(format!("alpha/{j}"), a.clone());
    }
    for (j, b) in theta.beta.iter().enumerate() {
        c.push(format!("beta/{j}"), b.clone());
    }
    for (ij, a) in theta.mixing.iter().enumerate() {
        c.push(format!("mixing/{ij}"), a.clone());
    }
    c.push_scalar("sigma0_sq", theta.sigma0_sq);
    c.push_vec("d", &theta.d);
    c.push_scalar("tau_sq", theta.tau_sq);
    let q = theta.q();
    let m = theta.mog.m();
    let grab = |f: fn(&IcMixture) -> &Vec<f64>| DMatrix::from_fn(q, m, |l, k| f(&theta.mog.ics[l])[k]);
    c.push("mog/weights", grab(|ic| &ic.weights));
    c.push("mog/means", grab(|ic| &ic.means));
    c.push("mog/variances", grab(|ic| &ic.variances));
}

pub fn theta_from_container(c: &Container) -> Result<ModelParams> {
    let count = |prefix: &str| c.entries.iter().filter(|(n, _)| n.starts_with(prefix)).count();
    let alpha = (0..count("alpha/")).map(|j| c.get(&format!("alpha/{j}")).cloned()).collect::<Result<Vec<_>>>()?;
    let beta = (0..count("beta/")).map(|j| c.get(&format!("beta/{j}")).cloned()).collect::<Result<Vec<_>>>()?;
    let mixing = (0..count("mixing/")).map(|j| c.get(&format!("mixing/{j}")).cloned()).collect::<Result<Vec<_>>>()?;
    let w = c.get("mog/weights")?;
    let mu = c.get("mog/means")?;
    let var = c.get("mog/variances")?;
    let ics = (0..w.nrows())
        .map(|l| IcMixture {
            weights: w.row(l).iter().copied().collect(),
            means: mu.row(l).iter().copied().collect(),
            variances: var.row(l).iter().copied().collect(),
        })
        .collect();
    Ok(ModelParams {
        alpha,
        beta,
        mixing,
        sigma0_sq: c.scalar("sigma0_sq")?,
        d: c.get("d")?.iter().copied().collect(),
        tau_sq: c.scalar("tau_sq")?,
        mog: MogParams { ics },
    })
}

impl FitResult {
    /// Container with Theta, posterior maps, pattern posteriors, per-IC
    /// marginal probabilities and the log-likelihood trace. Wall time is
    /// left out so repeated fits produce identical bytes.
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        theta_to_container(&self.theta, &mut c);
        let mm = &self.moments;
        let nv = mm.voxels.len();
        c.push("posterior/s0", mm.s0_map());
        if let Some(first) = mm.voxels.first() {
            let (q, n, k) = (first.q, first.n_subjects, first.n_visits);
            c.push("posterior/sij", DMatrix::from_fn(n * k * q, nv, |r, v| mm.voxels[v].e_s[r]));
            c.push("posterior/b", DMatrix::from_fn(n * q, nv, |r, v| mm.voxels[v].e_b[r]));
            let np = first.pattern_post.len();
            c.push("posterior/patterns", DMatrix::from_fn(np, nv, |r, v| mm.voxels[v].pattern_post[r]));
            let qm = first.marginals.prob.len();
            c.push("posterior/marginal_prob", DMatrix::from_fn(qm, nv, |r, v| mm.voxels[v].marginals.prob[r]));
        }
        c.push_vec("loglik_trace", &self.loglik_trace);
        c.push_scalar("iterations", self.iterations as f64);
        c.push_scalar("converged", if self.converged { 1.0 } else { 0.0 });
        c.push_scalar("mode_subspace", if self.mode == PatternMode::Subspace { 1.0 } else { 0.0 });
        c
    }
}
