//! Matching estimated components to true ones by |spatial correlation|.

use nalgebra::DMatrix;

use crate::error::{LicaError, Result};
use crate::linalg::correlation;

/// Minimum-cost assignment of rows to columns of a square cost matrix
/// (Kuhn-Munkres with potentials). Returns `assign[row] = column`.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // 1-based arrays; index 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `perm[t]` is the estimated component matched to true component t.
    pub perm: Vec<usize>,
    /// Sign applied to the estimate so the matched correlation is >= 0.
    pub signs: Vec<f64>,
    /// Matched correlations after sign flips.
    pub corr: Vec<f64>,
}

impl Matching {
    pub fn identity(q: usize) -> Self {
        Self { perm: (0..q).collect(), signs: vec![1.0; q], corr: vec![1.0; q] }
    }

    /// Rows of `est` reordered and sign-flipped into true-component order.
    /// `rows_per` > 1 treats consecutive groups of q rows (e.g. stacked
    /// covariates) the same way.
    pub fn align_rows(&self, est: &DMatrix<f64>) -> DMatrix<f64> {
        let q = self.perm.len();
        let groups = est.nrows() / q.max(1);
        let mut out = est.clone();
        for g in 0..groups {
            for t in 0..q {
                let src = est.row(g * q + self.perm[t]) * self.signs[t];
                out.set_row(g * q + t, &src);
            }
        }
        out
    }

    /// Columns of `est` (e.g. time courses) in true-component order.
    pub fn align_columns(&self, est: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = est.clone();
        for (t, &e) in self.perm.iter().enumerate() {
            out.set_column(t, &(est.column(e) * self.signs[t]));
        }
        out
    }
}

/// Assignment maximizing the total |correlation| between estimated and
/// true maps (both q x V).
pub fn match_components(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Matching> {
    if est.shape() != truth.shape() {
        return Err(LicaError::Matching(format!("estimate is {:?} but truth is {:?}", est.shape(), truth.shape())));
    }
    let q = est.nrows();
    let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> { (0..q).map(|r| m.row(r).iter().copied().collect()).collect() };
    let (er, tr) = (rows(est), rows(truth));
    let mut corr = DMatrix::zeros(q, q);
    for t in 0..q {
        for e in 0..q {
            corr[(t, e)] = correlation(&tr[t], &er[e]).ok_or_else(|| {
                let which = if correlation(&tr[t], &tr[t]).is_none() { format!("true component {t}") } else { format!("estimated component {e}") };
                LicaError::Matching(format!("{which} is constant"))
            })?;
        }
    }
    let cost = corr.map(|c: f64| -c.abs());
    let perm = hungarian(&cost);
    let signs: Vec<f64> = (0..q).map(|t| if corr[(t, perm[t])] < 0.0 { -1.0 } else { 1.0 }).collect();
    let matched = (0..q).map(|t| corr[(t, perm[t])] * signs[t]).collect();
    Ok(Matching { perm, signs, corr: matched })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn maps(q: usize, v: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(q, v, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn swapped_rows() {
        let t = maps(3, 50, 1);
        let mut e = t.clone();
        e.swap_rows(0, 1);
        let m = match_components(&e, &t).unwrap();
        assert_eq!(m.perm, vec![1, 0, 2]);
        assert_eq!(m.signs, vec![1.0; 3]);
    }

    #[test]
    fn negated_truth() {
        let t = maps(3, 50, 2);
        let m = match_components(&(-&t), &t).unwrap();
        assert_eq!(m.perm, vec![0, 1, 2]);
        assert_eq!(m.signs, vec![-1.0; 3]);
        assert!(m.corr.iter().all(|&c| (c - 1.0).abs() < 1e-12));
        assert!((m.align_rows(&(-&t)) - &t).amax() < 1e-15);
    }

    #[test]
    fn constant_map_is_an_error() {
        let t = maps(2, 20, 3);
        let mut e = t.clone();
        e.row_mut(1).fill(2.0);
        let err = match_components(&e, &t).unwrap_err();
        assert!(matches!(err, LicaError::Matching(_)));
        assert!(err.to_string().contains("estimated component 1"));
    }

    fn brute_force(cost: &DMatrix<f64>) -> f64 {
        fn rec(cost: &DMatrix<f64>, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.nrows() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..cost.ncols() {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost[(row, c)] + rec(cost, row + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost.ncols()])
    }

    proptest! {
        #[test]
        fn hungarian_matches_brute_force(n in 1usize..6, seed in 0u64..10_000) {
            let cost = maps(n, n, seed);
            let assign = hungarian(&cost);
            let mut seen = assign.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            let total: f64 = assign.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum();
            prop_assert!((total - brute_force(&cost)).abs() < 1e-12);
        }

        #[test]
        fn matching_is_a_signed_permutation(seed in 0u64..10_000) {
            let t = maps(3, 40, seed);
            let e = maps(3, 40, seed + 77_777);
            let m = match_components(&e, &t).unwrap();
            let mut seen = m.perm.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, vec![0, 1, 2]);
            prop_assert!(m.corr.iter().all(|&c| c >= 0.0));
            // Same total as exhaustive search over the 3! permutations.
            let abs = |t_: usize, e_: usize| {
                let a: Vec<f64> = t.row(t_).iter().copied().collect();
                let b: Vec<f64> = e.row(e_).iter().copied().collect();
                correlation(&a, &b).unwrap().abs()
            };
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let best = perms.iter().map(|p| (0..3).map(|k| abs(k, p[k])).sum::<f64>()).fold(0.0, f64::max);
            prop_assert!((m.corr.iter().sum::<f64>() - best).abs() < 1e-12);
        }
    }
}
