//! Generate, reduce, fit and score one simulated dataset.

use nalgebra::DMatrix;

use crate::datamodel::LongitudinalDataset;
use crate::em::{fit, FitConfig, FitResult};
use crate::error::Result;
use crate::predict::predict_subpopulation;
use crate::preprocess::{reduce_dataset, ReduceMethod};
use crate::simgen::matching::Matching;
use crate::simgen::metrics::{evaluate_recovery, RecoveryMetrics};
use crate::simgen::{generate, GroundTruth, Scenario};

#[derive(Debug, Clone)]
pub struct RecoveryRun {
    pub fit: FitResult,
    pub metrics: RecoveryMetrics,
    /// Mean of alpha_hat_j over the active region of each true IC,
    /// sign-aligned, indexed [visit][true IC].
    pub alpha_active: Vec<Vec<f64>>,
    pub seed: u64,
}

/// Raw data from `generate`, reduced to q rows per block.
pub fn simulate_reduced(scn: &Scenario, method: ReduceMethod) -> Result<(LongitudinalDataset, Vec<DMatrix<f64>>, GroundTruth)> {
    let (raw, truth) = generate(scn)?;
    let (ds, bases) = reduce_dataset(&raw, scn.q, method)?;
    Ok((ds, bases, truth))
}

/// alpha_hat_j(v) = s_j(v; x* = 0) - s_1(v; x* = 0), averaged over each
/// true IC's active region.
pub fn active_alpha(fit: &FitResult, truth: &GroundTruth, matching: &Matching) -> Result<Vec<Vec<f64>>> {
    let p = fit.theta.n_covariates();
    let zero = vec![0.0; p];
    let base = predict_subpopulation(&fit.theta, &fit.moments, &zero, 0)?;
    (0..fit.theta.n_visits())
        .map(|j| {
            let pj = predict_subpopulation(&fit.theta, &fit.moments, &zero, j)?;
            Ok((0..truth.masks.len())
                .map(|t| {
                    let (e, s) = (matching.perm[t], matching.signs[t]);
                    let vox: Vec<usize> = (0..truth.masks[t].len()).filter(|&v| truth.masks[t][v]).collect();
                    vox.iter().map(|&v| s * (pj.s_hat[(e, v)] - base.s_hat[(e, v)])).sum::<f64>() / vox.len().max(1) as f64
                })
                .collect())
        })
        .collect()
}

/// Initialization attempts per fit before a component collapse is final.
pub const FIT_ATTEMPTS: usize = 3;

/// `fit`, restarted from a different initialization seed when EM collapses
/// a mixture component. The first attempt uses `seed` itself. Returns the
/// fit and the number of restarts used.
pub fn fit_with_restarts(ds: &LongitudinalDataset, cfg: &FitConfig, seed: u64) -> Result<(FitResult, usize)> {
    let mut attempt = 0;
    loop {
        let init_seed = seed.wrapping_add((attempt as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        match fit(ds, cfg, init_seed) {
            Err(e) if e.kind() == "component_collapse" && attempt + 1 < FIT_ATTEMPTS => {
                log::warn!("seed {seed}: {e}; restarting from a new initialization");
                attempt += 1;
            }
            other => return other.map(|f| (f, attempt)),
        }
    }
}

/// One replicate of the recovery study; the scenario seed drives both
/// generation and initialization.
pub fn run_recovery(scn: &Scenario, cfg: &FitConfig) -> Result<RecoveryRun> {
    let (ds, bases, truth) = simulate_reduced(scn, ReduceMethod::Project)?;
    let (fitted, _) = fit_with_restarts(&ds, cfg, scn.seed)?;
    let tcs: Vec<DMatrix<f64>> = bases.iter().zip(&fitted.theta.mixing).map(|(u, a)| u * a).collect();
    let metrics = evaluate_recovery(&fitted, &truth, Some(&tcs))?;
    let alpha_active = active_alpha(&fitted, &truth, &metrics.matching)?;
    Ok(RecoveryRun { fit: fitted, metrics, alpha_active, seed: scn.seed })
}
