//! Type-I error and power of the voxel-wise covariate tests on repeated
//! small simulated datasets.

use rayon::prelude::*;

use crate::datamodel::Contrast;
use crate::em::{FitConfig, FitResult};
use crate::error::{LicaError, Result};
use crate::inference::{infer, InferenceOptions};
use crate::patterns::PatternMode;
use crate::simgen::{fit_with_restarts, generate_reduced, match_components, GroundTruth, Scenario};

/// The two hypotheses: no covariate effect at the last visit, and no
/// change of the covariate effect between the first and last visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TestKind {
    Visit,
    Change,
}

impl TestKind {
    pub const ALL: [TestKind; 2] = [TestKind::Visit, TestKind::Change];

    pub fn name(self) -> &'static str {
        match self {
            Self::Visit => "visit_effect",
            Self::Change => "effect_change",
        }
    }

    /// Contrast over C*(v) for IC `l` and the first covariate.
    pub fn contrast(self, q: usize, k: usize, p: usize, l: usize) -> Contrast {
        let dim = Contrast::stacked_dim(q, k, p);
        let mut c = vec![0.0; dim];
        c[Contrast::beta_index(q, k, p, k - 1, 0, l)] = 1.0;
        if self == Self::Change {
            c[Contrast::beta_index(q, k, p, 0, 0, l)] = -1.0;
        }
        Contrast::new(self.name(), c).expect("nonzero contrast")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub runs_per_effect: usize,
    pub alphas: Vec<f64>,
    pub effects: Vec<f64>,
    pub base_seed: u64,
    pub fit: FitConfig,
    /// Every n-th run is also fitted in exact mode; 0 disables.
    pub exact_every: usize,
    /// IC carrying the covariate effect in the ground truth.
    pub tested_ic: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            runs_per_effect: 100,
            alphas: vec![0.01, 0.05, 0.1],
            effects: vec![0.0, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0, 1.125, 1.25],
            base_seed: 0,
            fit: FitConfig { mode: PatternMode::Subspace, ..FitConfig::default() },
            exact_every: 10,
            tested_ic: 0,
        }
    }
}

/// Rejection counts of one run at one effect size.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub effect: f64,
    pub seed: u64,
    pub converged: bool,
    /// Re-initializations needed after a component collapse.
    pub restarts: usize,
    /// [test][alpha] rejections among active-region voxels of the tested IC.
    pub region_rejections: Vec<Vec<usize>>,
    pub region_voxels: usize,
    /// [test][alpha] rejections among all voxels of the tested IC.
    pub all_rejections: Vec<Vec<usize>>,
    pub all_voxels: usize,
    /// Largest |z_exact - z_subspace| over voxels and tests, for spot-checked runs.
    pub exact_z_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPoint {
    pub test: TestKind,
    pub effect: f64,
    pub alpha: f64,
    /// Mean per-run rejection rate over the voxels whose hypothesis status
    /// is known: every voxel when the effect is 0 (type-I error), the
    /// active region of the tested IC otherwise (power).
    pub rate: f64,
    /// SE of `rate` from the spread of per-run rates, which accounts for
    /// correlation between voxels of one run.
    pub se: f64,
    /// Mean per-run rejection rate over active-region voxels.
    pub rate_region: f64,
    /// Binomial SE of `rate_region` treating every voxel test as an
    /// independent trial.
    pub se_binomial: f64,
    /// SE of `rate_region` from the spread of per-run rates.
    pub se_runs: f64,
    /// Rejection rate over every voxel of the tested IC (all null when
    /// the effect is 0).
    pub rate_all_voxels: f64,
    pub se_all_runs: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    pub points: Vec<CalibrationPoint>,
    pub runs: Vec<RunOutcome>,
}

impl CalibrationTable {
    pub fn point(&self, test: TestKind, effect: f64, alpha: f64) -> Option<&CalibrationPoint> {
        self.points.iter().find(|p| p.test == test && p.effect == effect && p.alpha == alpha)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| LicaError::Io(std::io::Error::other(e));
        w.write_record([
            "test", "effect", "alpha", "rate", "se", "rate_region", "se_binomial", "se_runs", "rate_all_voxels", "se_all_runs", "n_runs",
        ])
        .map_err(io)?;
        for p in &self.points {
            w.write_record([
                p.test.name().to_string(),
                p.effect.to_string(),
                p.alpha.to_string(),
                format!("{:.6}", p.rate),
                format!("{:.6}", p.se),
                format!("{:.6}", p.rate_region),
                format!("{:.6}", p.se_binomial),
                format!("{:.6}", p.se_runs),
                format!("{:.6}", p.rate_all_voxels),
                format!("{:.6}", p.se_all_runs),
                p.n_runs.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Index of the fitted IC matched to truth IC `l`.
fn matched_ic(fit: &FitResult, truth: &GroundTruth, l: usize) -> Result<usize> {
    let m = match_components(&fit.moments.s0_map(), &truth.s0)?;
    Ok(m.perm[l])
}

fn p_values(fit: &FitResult, truth: &GroundTruth, scn: &Scenario, l: usize, cov: &nalgebra::DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
    let est = matched_ic(fit, truth, l)?;
    let (q, k, p) = (scn.q, scn.n_visits, cov.ncols());
    let contrasts: Vec<Contrast> = TestKind::ALL.iter().map(|t| t.contrast(q, k, p, est)).collect();
    let res = infer(&fit.theta, &fit.moments, cov, &contrasts, InferenceOptions::default())?;
    Ok(res.contrasts.into_iter().map(|c| c.p).collect())
}

/// One simulated dataset: generate, fit, test.
pub fn run_once(base: &Scenario, cfg: &CalibrationConfig, effect: f64, seed: u64, spot_check: bool) -> Result<RunOutcome> {
    let mut scn = base.clone();
    let last = scn.n_visits - 1;
    scn.beta_mean = vec![0.0; scn.n_visits];
    scn.beta_mean[last] = effect;
    scn.seed = seed;
    let (ds, truth) = generate_reduced(&scn)?;
    let l = cfg.tested_ic;
    let (fitted, restarts) = fit_with_restarts(&ds, &cfg.fit, seed)?;
    let pvals = p_values(&fitted, &truth, &scn, l, &ds.covariates)?;
    let region: Vec<usize> = (0..truth.masks[l].len()).filter(|&v| truth.masks[l][v]).collect();
    let count = |pv: &[f64], vox: &mut dyn Iterator<Item = usize>, a: f64| vox.filter(|&v| pv[v] <= a).count();
    let mut region_rejections = Vec::new();
    let mut all_rejections = Vec::new();
    for pv in &pvals {
        region_rejections.push(cfg.alphas.iter().map(|&a| count(pv, &mut region.iter().copied(), a)).collect());
        all_rejections.push(cfg.alphas.iter().map(|&a| count(pv, &mut (0..pv.len()), a)).collect());
    }
    let exact_z_gap = if spot_check {
        let exact_cfg = FitConfig { mode: PatternMode::Exact, ..cfg.fit.clone() };
        let (exact, _) = fit_with_restarts(&ds, &exact_cfg, seed)?;
        let pe = p_values(&exact, &truth, &scn, l, &ds.covariates)?;
        let normal = statrs::distribution::Normal::new(0.0, 1.0).expect("valid normal");
        use statrs::distribution::ContinuousCDF;
        let z = |p: f64| -normal.inverse_cdf(p / 2.0);
        let mut gap = 0.0f64;
        for (a, b) in pvals.iter().zip(&pe) {
            for (x, y) in a.iter().zip(b) {
                gap = gap.max((z(*x) - z(*y)).abs());
            }
        }
        Some(gap)
    } else {
        None
    };
    Ok(RunOutcome {
        effect,
        seed,
        converged: fitted.converged,
        restarts,
        region_rejections,
        region_voxels: region.len(),
        all_rejections,
        all_voxels: truth.s0.ncols(),
        exact_z_gap,
    })
}

fn mean_se(rates: &[f64]) -> (f64, f64) {
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    if rates.len() < 2 {
        return (mean, 0.0);
    }
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs every (effect, run) pair; run `r` of effect index `e` uses seed
/// `base_seed + e * runs_per_effect + r`.
pub fn run_test_calibration(base: &Scenario, cfg: &CalibrationConfig) -> Result<CalibrationTable> {
    if base.n_visits < 2 || base.n_covariates() == 0 {
        return Err(LicaError::Argument("calibration needs at least two visits and one covariate".into()));
    }
    if cfg.tested_ic >= base.q {
        return Err(LicaError::Argument(format!("tested IC {} out of range (q = {})", cfg.tested_ic, base.q)));
    }
    let jobs: Vec<(f64, u64, bool)> = cfg
        .effects
        .iter()
        .enumerate()
        .flat_map(|(e, &eff)| {
            (0..cfg.runs_per_effect).map(move |r| {
                let idx = (e * cfg.runs_per_effect + r) as u64;
                (eff, idx, cfg.exact_every > 0 && r % cfg.exact_every == 0)
            })
        })
        .collect();
    let runs: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|&(eff, idx, spot)| {
            let seed = cfg.base_seed.wrapping_add(idx);
            run_once(base, cfg, eff, seed, spot).map_err(|e| LicaError::Numeric(format!("calibration run seed {seed}: {e}")))
        })
        .collect::<Result<_>>()?;
    let mut points = Vec::new();
    for (ti, &test) in TestKind::ALL.iter().enumerate() {
        for &eff in &cfg.effects {
            let these: Vec<&RunOutcome> = runs.iter().filter(|r| r.effect == eff).collect();
            for (ai, &alpha) in cfg.alphas.iter().enumerate() {
                let region: Vec<f64> =
                    these.iter().map(|r| r.region_rejections[ti][ai] as f64 / r.region_voxels.max(1) as f64).collect();
                let all: Vec<f64> = these.iter().map(|r| r.all_rejections[ti][ai] as f64 / r.all_voxels as f64).collect();
                let (rate_region, se_runs) = mean_se(&region);
                let (rate_all, se_all) = mean_se(&all);
                let trials: usize = these.iter().map(|r| r.region_voxels).sum();
                let (rate, se) = if eff == 0.0 { (rate_all, se_all) } else { (rate_region, se_runs) };
                points.push(CalibrationPoint {
                    test,
                    effect: eff,
                    alpha,
                    rate,
                    se,
                    rate_region,
                    se_binomial: (rate_region * (1.0 - rate_region) / trials.max(1) as f64).sqrt(),
                    se_runs,
                    rate_all_voxels: rate_all,
                    se_all_runs: se_all,
                    n_runs: these.len(),
                });
            }
        }
    }
    Ok(CalibrationTable { points, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrasts_pick_last_visit_beta() {
        let v = TestKind::Visit.contrast(2, 2, 1, 1);
        let c = TestKind::Change.contrast(2, 2, 1, 1);
        assert_eq!(v.coefficients, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(c.coefficients, vec![0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn run_level_standard_error() {
        let (m, se) = mean_se(&[0.1, 0.3]);
        assert!((m - 0.2).abs() < 1e-15);
        assert!((se - 0.1).abs() < 1e-12);
        assert_eq!(mean_se(&[0.4]), (0.4, 0.0));
    }

    #[test]
    fn rejects_bad_tested_ic() {
        let cfg = CalibrationConfig { tested_ic: 5, ..Default::default() };
        assert!(matches!(run_test_calibration(&Scenario::calibration(0.0), &cfg), Err(LicaError::Argument(_))));
    }
}
