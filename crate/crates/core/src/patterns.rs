//! Latent-state patterns z(v): enumeration of the full space and the
//! one-active-IC subspace, and per-pattern prior/mean/variance lookup.
//!
//! States are 0-based here: state 0 is the background component. Patterns
//! are enumerated as a base-m counter with IC 0 varying fastest, so the
//! subspace order is: all-background, then IC 0 in states 1..m, then IC 1,
//! and so on. The subspace set is the full set filtered in the same order.

use nalgebra::DMatrix;

use crate::datamodel::{ModelParams, MogParams};
use crate::error::{LicaError, Result};

pub const DEFAULT_PATTERN_BUDGET: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternMode {
    Exact,
    Subspace,
}

impl std::str::FromStr for PatternMode {
    type Err = LicaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" | "full" => Ok(PatternMode::Exact),
            "subspace" => Ok(PatternMode::Subspace),
            other => Err(LicaError::Config(format!("unknown mode '{other}' (exact|subspace)"))),
        }
    }
}

impl std::fmt::Display for PatternMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PatternMode::Exact => "exact",
            PatternMode::Subspace => "subspace",
        })
    }
}

/// A pattern realized against MoG parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPattern {
    pub z: Vec<usize>,
    pub prior_log: f64,
    pub mu_z: Vec<f64>,
    /// Diagonal of Sigma_z.
    pub sigma_z: Vec<f64>,
}

impl LatentPattern {
    pub fn sigma_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.sigma_z))
    }

    pub fn n_active(&self) -> usize {
        self.z.iter().filter(|&&k| k != 0).count()
    }
}

/// Number of patterns a mode would enumerate, without enumerating.
pub fn pattern_count(q: usize, m: usize, mode: PatternMode) -> u128 {
    match mode {
        PatternMode::Exact => (m as u128).checked_pow(q as u32).unwrap_or(u128::MAX),
        PatternMode::Subspace => (m as u128 - 1) * q as u128 + 1,
    }
}

/// Enumerates pattern skeletons. `budget` guards the full space only.
pub fn enumerate_patterns(q: usize, m: usize, mode: PatternMode, budget: u64) -> Result<Vec<Vec<usize>>> {
    if q == 0 {
        return Err(LicaError::Argument("q must be at least 1".into()));
    }
    if m < 1 {
        return Err(LicaError::Argument("m must be at least 1".into()));
    }
    match mode {
        PatternMode::Exact => {
            let count = pattern_count(q, m, mode);
            if count > budget as u128 {
                return Err(LicaError::Budget { patterns: count, budget });
            }
            let mut out = Vec::with_capacity(count as usize);
            let mut z = vec![0usize; q];
            loop {
                out.push(z.clone());
                let mut pos = 0;
                loop {
                    if pos == q {
                        return Ok(out);
                    }
                    z[pos] += 1;
                    if z[pos] < m {
                        break;
                    }
                    z[pos] = 0;
                    pos += 1;
                }
            }
        }
        PatternMode::Subspace => {
            let mut out = Vec::with_capacity((m - 1) * q + 1);
            out.push(vec![0; q]);
            for l in 0..q {
                for k in 1..m {
                    let mut z = vec![0; q];
                    z[l] = k;
                    out.push(z);
                }
            }
            Ok(out)
        }
    }
}

pub fn realize_pattern(z: &[usize], mog: &MogParams) -> LatentPattern {
    let mut prior_log = 0.0;
    let mut mu_z = Vec::with_capacity(z.len());
    let mut sigma_z = Vec::with_capacity(z.len());
    for (l, &k) in z.iter().enumerate() {
        let ic = &mog.ics[l];
        prior_log += ic.weights[k].ln();
        mu_z.push(ic.means[k]);
        sigma_z.push(ic.variances[k]);
    }
    LatentPattern { z: z.to_vec(), prior_log, mu_z, sigma_z }
}

/// Exact posterior mass of the subspace at one voxel: the sum of p[z | y]
/// over the one-active-IC patterns, with p computed over the full space.
pub fn subspace_mass(
    y_voxel: &[f64],
    v: usize,
    theta: &ModelParams,
    covariates: &DMatrix<f64>,
    budget: u64,
) -> Result<f64> {
    let q = theta.q();
    let m = theta.mog.m();
    let full = enumerate_patterns(q, m, PatternMode::Exact, budget)?;
    let cache = crate::em::estep::PatternCache::build(theta, &full)?;
    let tables = cache.voxel_tables(y_voxel, v, theta, covariates);
    let post = cache.pattern_posterior(&tables)?;
    Ok(full
        .iter()
        .zip(&post)
        .filter(|(z, _)| z.iter().filter(|&&k| k != 0).count() <= 1)
        .map(|(_, p)| p)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::IcMixture;

    fn mog(q: usize, weights: &[f64], means: &[f64], vars: &[f64]) -> MogParams {
        MogParams {
            ics: (0..q)
                .map(|_| IcMixture { weights: weights.to_vec(), means: means.to_vec(), variances: vars.to_vec() })
                .collect(),
        }
    }

    #[test]
    fn subspace_q3_m2_order() {
        let p = enumerate_patterns(3, 2, PatternMode::Subspace, 10).unwrap();
        assert_eq!(p, vec![vec![0, 0, 0], vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn full_q3_m2_has_eight() {
        let p = enumerate_patterns(3, 2, PatternMode::Exact, 100).unwrap();
        assert_eq!(p.len(), 8);
        let sub = enumerate_patterns(3, 2, PatternMode::Subspace, 100).unwrap();
        let filtered: Vec<_> = p.iter().filter(|z| z.iter().filter(|&&k| k != 0).count() <= 1).cloned().collect();
        assert_eq!(filtered, sub);
    }

    #[test]
    fn q1_spaces_coincide() {
        for m in 2..5 {
            let a = enumerate_patterns(1, m, PatternMode::Exact, 100).unwrap();
            let b = enumerate_patterns(1, m, PatternMode::Subspace, 100).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), m);
        }
    }

    #[test]
    fn budget_guard() {
        let err = enumerate_patterns(20, 2, PatternMode::Exact, DEFAULT_PATTERN_BUDGET).unwrap_err();
        assert!(matches!(err, LicaError::Budget { patterns: 1_048_576, .. }));
        assert_eq!(enumerate_patterns(20, 2, PatternMode::Subspace, 1).unwrap().len(), 21);
    }

    #[test]
    fn prior_of_background_pattern() {
        let g = mog(3, &[0.9, 0.1], &[0.0, 4.0], &[1.0, 2.0]);
        let p = realize_pattern(&[0, 0, 0], &g);
        assert!((p.prior_log - 3.0 * 0.9f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn component_lookup() {
        let g = mog(1, &[0.5, 0.5], &[0.0, 4.0], &[1.0, 2.0]);
        let p = realize_pattern(&[1], &g);
        assert_eq!(p.mu_z, vec![4.0]);
        assert_eq!(p.sigma_matrix(), DMatrix::from_element(1, 1, 2.0));
    }

    #[test]
    fn full_space_priors_sum_to_one() {
        let g = MogParams {
            ics: vec![
                IcMixture { weights: vec![0.7, 0.3], means: vec![0.0, 1.0], variances: vec![1.0, 1.0] },
                IcMixture { weights: vec![0.55, 0.45], means: vec![0.0, 1.0], variances: vec![1.0, 1.0] },
                IcMixture { weights: vec![0.95, 0.05], means: vec![0.0, 1.0], variances: vec![1.0, 1.0] },
            ],
        };
        let total: f64 = enumerate_patterns(3, 2, PatternMode::Exact, 100)
            .unwrap()
            .iter()
            .map(|z| realize_pattern(z, &g).prior_log.exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn prior_sums(q in 1usize..5, m in 2usize..4, raw in proptest::collection::vec(0.05f64..1.0, 12)) {
                let ics = (0..q).map(|l| {
                    let w: Vec<f64> = (0..m).map(|k| raw[(l * m + k) % raw.len()]).collect();
                    let s: f64 = w.iter().sum();
                    IcMixture { weights: w.iter().map(|x| x / s).collect(), means: vec![0.0; m], variances: vec![1.0; m] }
                }).collect();
                let g = MogParams { ics };
                let full: f64 = enumerate_patterns(q, m, PatternMode::Exact, 1 << 20).unwrap()
                    .iter().map(|z| realize_pattern(z, &g).prior_log.exp()).sum();
                let sub: f64 = enumerate_patterns(q, m, PatternMode::Subspace, 1).unwrap()
                    .iter().map(|z| realize_pattern(z, &g).prior_log.exp()).sum();
                prop_assert!((full - 1.0).abs() < 1e-12);
                prop_assert!(sub <= 1.0 + 1e-12);
            }

            #[test]
            fn enumeration_is_deterministic_and_distinct(q in 1usize..5, m in 2usize..4) {
                let a = enumerate_patterns(q, m, PatternMode::Exact, 1 << 20).unwrap();
                let b = enumerate_patterns(q, m, PatternMode::Exact, 1 << 20).unwrap();
                prop_assert_eq!(&a, &b);
                let set: std::collections::HashSet<_> = a.iter().cloned().collect();
                prop_assert_eq!(set.len(), a.len());
                prop_assert_eq!(enumerate_patterns(q, m, PatternMode::Subspace, 1).unwrap().len(), (m - 1) * q + 1);
            }
        }
    }
}
