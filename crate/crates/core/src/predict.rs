//! Subpopulation component maps s_j(v) = s_0(v) + alpha_j(v) + beta_j(v)'x*
//! and per-voxel longitudinal trends.

use std::io::Write;

use nalgebra::DMatrix;

use crate::datamodel::ModelParams;
use crate::em::PosteriorMoments;
use crate::error::{LicaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SubpopulationMap {
    /// q x V.
    pub s_hat: DMatrix<f64>,
    pub visit: usize,
    pub x_star: Vec<f64>,
    pub threshold: Option<f64>,
}

impl SubpopulationMap {
    /// Zero every entry with |value| below the cutoff.
    pub fn thresholded(&self, cutoff: f64) -> Self {
        let s_hat = self.s_hat.map(|x| if x.abs() >= cutoff { x } else { 0.0 });
        Self { s_hat, threshold: Some(cutoff), ..self.clone() }
    }
}

pub fn predict_subpopulation(
    theta: &ModelParams,
    moments: &PosteriorMoments,
    x_star: &[f64],
    visit: usize,
) -> Result<SubpopulationMap> {
    let (q, p) = (theta.q(), theta.n_covariates());
    if x_star.len() != p {
        return Err(LicaError::Argument(format!("covariate profile has {} entries; the model has {p}", x_star.len())));
    }
    if visit >= theta.n_visits() {
        return Err(LicaError::Argument(format!("visit {visit} out of range (K = {})", theta.n_visits())));
    }
    let nv = moments.voxels.len();
    let mut s_hat = moments.s0_map();
    let mut fixed = vec![0.0; q];
    for v in 0..nv {
        theta.fixed_effect(visit, v, x_star, &mut fixed);
        for l in 0..q {
            if fixed[l] != 0.0 {
                s_hat[(l, v)] += fixed[l];
            }
        }
    }
    Ok(SubpopulationMap { s_hat, visit, x_star: x_star.to_vec(), threshold: None })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendRow {
    pub voxel: usize,
    pub visit: usize,
    pub ic: usize,
    pub value: f64,
}

/// Trajectories across visits for the voxels in `mask`, one row per
/// (voxel, visit, IC).
pub fn extract_trends(maps: &[SubpopulationMap], mask: &[usize]) -> Result<Vec<TrendRow>> {
    let Some(first) = maps.first() else {
        return Ok(Vec::new());
    };
    let shape = first.s_hat.shape();
    if maps.iter().any(|m| m.s_hat.shape() != shape) {
        return Err(LicaError::Argument("maps have different dimensions".into()));
    }
    if let Some(&v) = mask.iter().find(|&&v| v >= shape.1) {
        return Err(LicaError::Argument(format!("mask voxel {v} out of range (V = {})", shape.1)));
    }
    let mut rows = Vec::with_capacity(mask.len() * maps.len() * shape.0);
    for &v in mask {
        for m in maps {
            for l in 0..shape.0 {
                rows.push(TrendRow { voxel: v, visit: m.visit, ic: l, value: m.s_hat[(l, v)] });
            }
        }
    }
    Ok(rows)
}

pub fn write_map_csv<W: Write>(out: W, map: &SubpopulationMap, coords: Option<&[[i64; 3]]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| LicaError::Io(std::io::Error::other(e));
    let q = map.s_hat.nrows();
    let mut header = vec!["voxel".to_string(), "x".into(), "y".into(), "z".into()];
    header.extend((0..q).map(|l| format!("ic{l}")));
    w.write_record(&header).map_err(io)?;
    for v in 0..map.s_hat.ncols() {
        let mut rec = vec![v.to_string()];
        match coords {
            Some(c) => rec.extend(c[v].iter().map(|x| x.to_string())),
            None => rec.extend([String::new(), String::new(), String::new()]),
        }
        rec.extend((0..q).map(|l| format!("{:.17e}", map.s_hat[(l, v)])));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trends_csv<W: Write>(out: W, rows: &[TrendRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| LicaError::Io(std::io::Error::other(e));
    w.write_record(["voxel", "visit", "ic", "value"]).map_err(io)?;
    for r in rows {
        w.write_record([r.voxel.to_string(), r.visit.to_string(), r.ic.to_string(), format!("{:.17e}", r.value)])
            .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{estep_all, PosteriorMoments};
    use crate::em::PatternCache;
    use crate::patterns::{enumerate_patterns, PatternMode};
    use crate::simgen::forward::{random_instance, Dims};

    fn fitted() -> (ModelParams, PosteriorMoments) {
        let dims = Dims { q: 2, m: 2, n: 4, k: 3, p: 2, v: 12 };
        let (ds, theta) = random_instance(dims, 11).unwrap();
        let patterns = enumerate_patterns(2, 2, PatternMode::Exact, u64::MAX).unwrap();
        let cache = PatternCache::build(&theta, &patterns).unwrap();
        let (mom, _) = estep_all(&ds, &theta, &cache).unwrap();
        (theta, mom)
    }

    #[test]
    fn baseline_reference_is_bitwise_s0() {
        let (theta, mom) = fitted();
        let map = predict_subpopulation(&theta, &mom, &[0.0, 0.0], 0).unwrap();
        assert_eq!(map.s_hat, mom.s0_map());
    }

    #[test]
    fn linear_in_profile() {
        let (theta, mom) = fitted();
        let xa = [0.7, -1.3];
        let xb = [2.0, 0.25];
        for j in 0..3 {
            let pa = predict_subpopulation(&theta, &mom, &xa, j).unwrap().s_hat;
            let pb = predict_subpopulation(&theta, &mom, &xb, j).unwrap().s_hat;
            let p0 = predict_subpopulation(&theta, &mom, &[0.0, 0.0], j).unwrap().s_hat;
            let pab = predict_subpopulation(&theta, &mom, &[xa[0] + xb[0], xa[1] + xb[1]], j).unwrap().s_hat;
            let err = (&pa + &pb - &p0 - &pab).amax();
            assert!(err <= 1e-12 * pab.amax().max(1.0), "visit {j}: {err}");
        }
    }

    #[test]
    fn wrong_profile_length() {
        let (theta, mom) = fitted();
        assert!(matches!(predict_subpopulation(&theta, &mom, &[1.0], 0), Err(LicaError::Argument(_))));
        assert!(matches!(predict_subpopulation(&theta, &mom, &[0.0, 0.0], 3), Err(LicaError::Argument(_))));
    }

    #[test]
    fn thresholding_only_zeroes() {
        let (theta, mom) = fitted();
        let map = predict_subpopulation(&theta, &mom, &[1.0, 1.0], 1).unwrap();
        let t = map.thresholded(0.5);
        for (a, b) in map.s_hat.iter().zip(t.s_hat.iter()) {
            assert!(*b == 0.0 || *b == *a);
        }
    }

    #[test]
    fn trend_tables() {
        let flat = |j| SubpopulationMap { s_hat: DMatrix::from_element(2, 5, 1.5), visit: j, x_star: vec![], threshold: None };
        let maps: Vec<_> = (0..3).map(flat).collect();
        let rows = extract_trends(&maps, &[4]).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.value == 1.5 && r.voxel == 4));
        assert!(extract_trends(&maps, &[]).unwrap().is_empty());
        let mut buf = Vec::new();
        write_trends_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);
    }
}
