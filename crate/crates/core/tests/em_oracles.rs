mod common;

use common::*;
use lica::simgen::{random_params, Dims};
use lica::PatternMode;

#[test]
fn structured_moments_match_sampling_oracle() {
    let s = estep_mc_oracle(11, 40, 10_000);
    assert!(s.fraction_within() >= 0.98, "{s:?}");
    assert!(s.max_abs_z < 5.5, "{s:?}");
}

#[test]
fn sigma_r_structured_equals_dense() {
    for seed in 0..6 {
        let dims = Dims { q: 2 + seed as usize % 2, m: 2 + seed as usize / 3, n: 3, k: 2, p: 1, v: 4 };
        let theta = random_params(dims, 40 + seed);
        for mode in [PatternMode::Exact, PatternMode::Subspace] {
            let gap = sigma_r_gap(&theta, mode);
            assert!(gap <= 1e-8, "seed {seed} {mode}: {gap:e}");
        }
    }
}

#[test]
fn exact_em_loglik_never_decreases() {
    for seed in 100..105 {
        let trace = em_trace(seed, 30);
        assert!(trace.len() >= 30);
        assert!(worst_decrease(&trace) <= 1e-8, "seed {seed}");
    }
}

#[test]
fn mstep_is_stationary_for_q() {
    for seed in 200..203 {
        let c = mstep_optimality(seed);
        for (g, w) in &c.worst {
            assert!(*w <= 1e-6, "seed {seed} group {g}: {w:e}");
        }
        assert!(c.q_after >= c.q_before - 1e-9 * c.q_before.abs());
        assert!(c.golden_excess <= 1e-10, "seed {seed}: {:e}", c.golden_excess);
    }
}
