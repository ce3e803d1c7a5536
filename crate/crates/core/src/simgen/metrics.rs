//! Recovery metrics against simulation ground truth.

use nalgebra::DMatrix;

use crate::em::FitResult;
use crate::error::{LicaError, Result};
use crate::linalg::correlation;
use crate::simgen::generate::GroundTruth;
use crate::simgen::matching::{match_components, Matching};

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryMetrics {
    pub matching: Matching,
    /// Mean matched population-map correlation.
    pub population_corr: f64,
    /// Mean over (i, j, IC) of the subject/visit-map correlations.
    pub subject_corr: f64,
    /// Mean over (i, j, IC) of the time-course correlations.
    pub time_course_corr: f64,
    /// (1/KV) sum_j sum_v ||beta_hat_j(v) - beta_j(v)||_F^2.
    pub beta_mse: f64,
}

fn row_corr(a: &DMatrix<f64>, ra: usize, b: &DMatrix<f64>, rb: usize) -> f64 {
    let x: Vec<f64> = a.row(ra).iter().copied().collect();
    let y: Vec<f64> = b.row(rb).iter().copied().collect();
    correlation(&x, &y).unwrap_or(0.0)
}

/// Metrics from raw estimates: population maps (q x V), subject/visit
/// maps and time courses per (i, j), and beta per visit.
pub fn recovery_metrics(
    s0: &DMatrix<f64>,
    sij: &[DMatrix<f64>],
    time_courses: &[DMatrix<f64>],
    beta: &[DMatrix<f64>],
    truth: &GroundTruth,
) -> Result<RecoveryMetrics> {
    let matching = match_components(s0, &truth.s0)?;
    let q = s0.nrows();
    let population_corr = matching.corr.iter().sum::<f64>() / q as f64;

    if sij.len() != truth.s.len() || time_courses.len() != truth.mixing.len() || beta.len() != truth.beta.len() {
        return Err(LicaError::Argument("estimate and truth disagree on (N, K)".into()));
    }
    let mut subject = 0.0;
    for (est, tru) in sij.iter().zip(&truth.s) {
        let al = matching.align_rows(est);
        subject += (0..q).map(|l| row_corr(&al, l, tru, l)).sum::<f64>();
    }
    let subject_corr = subject / (q * sij.len()) as f64;

    let mut tc = 0.0;
    for (est, tru) in time_courses.iter().zip(&truth.mixing) {
        if est.shape() != tru.shape() {
            return Err(LicaError::Argument(format!("time courses are {:?}, truth {:?}", est.shape(), tru.shape())));
        }
        let al = matching.align_columns(est).transpose();
        let tt = tru.transpose();
        tc += (0..q).map(|l| row_corr(&al, l, &tt, l)).sum::<f64>();
    }
    let time_course_corr = tc / (q * time_courses.len()) as f64;

    let nv = s0.ncols();
    let mut sse = 0.0;
    for (est, tru) in beta.iter().zip(&truth.beta) {
        let al = matching.align_rows(est);
        sse += (al - tru).norm_squared();
    }
    let beta_mse = sse / (beta.len() * nv) as f64;

    Ok(RecoveryMetrics { matching, population_corr, subject_corr, time_course_corr, beta_mse })
}

/// Metrics for a fit. `time_courses` are the estimated per-(i, j) time
/// courses in the truth's coordinates (for reduced data, the mixing
/// matrices themselves, which is the default when `None`).
pub fn evaluate_recovery(fit: &FitResult, truth: &GroundTruth, time_courses: Option<&[DMatrix<f64>]>) -> Result<RecoveryMetrics> {
    let mm = &fit.moments;
    let k = fit.theta.n_visits();
    let n = fit.theta.n_subjects();
    let sij: Vec<DMatrix<f64>> = (0..n * k).map(|ij| mm.sij_map(ij / k, ij % k)).collect();
    let tcs = time_courses.unwrap_or(&fit.theta.mixing);
    recovery_metrics(&mm.s0_map(), &sij, tcs, &fit.theta.beta, truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{generate_reduced, Scenario};

    fn truth() -> GroundTruth {
        let mut scn = Scenario::recovery(3, 0.5);
        scn.set_grid([10, 10, 1]);
        scn.seed = 5;
        generate_reduced(&scn).unwrap().1
    }

    #[test]
    fn perfect_estimate() {
        let t = truth();
        let m = recovery_metrics(&t.s0, &t.s, &t.mixing, &t.beta, &t).unwrap();
        assert!((m.population_corr - 1.0).abs() < 1e-12);
        assert!((m.subject_corr - 1.0).abs() < 1e-12);
        assert!((m.time_course_corr - 1.0).abs() < 1e-12);
        assert_eq!(m.beta_mse, 0.0);
    }

    #[test]
    fn shifted_beta() {
        let t = truth();
        let c = 0.3;
        let shifted: Vec<_> = t.beta.iter().map(|b| b.add_scalar(c)).collect();
        let m = recovery_metrics(&t.s0, &t.s, &t.mixing, &shifted, &t).unwrap();
        let entries = t.beta[0].nrows() as f64;
        assert!((m.beta_mse - c * c * entries).abs() < 1e-12);
    }

    #[test]
    fn permuted_and_flipped_estimate() {
        let t = truth();
        let perm = |m: &DMatrix<f64>| {
            let mut out = m.clone();
            out.swap_rows(0, 2);
            out.row_mut(1).neg_mut();
            out
        };
        let s0 = perm(&t.s0);
        let sij: Vec<_> = t.s.iter().map(perm).collect();
        let beta: Vec<_> = t.beta.iter().map(perm).collect();
        let tcs: Vec<_> = t
            .mixing
            .iter()
            .map(|a| {
                let mut out = a.clone();
                out.swap_columns(0, 2);
                out.column_mut(1).neg_mut();
                out
            })
            .collect();
        let m = recovery_metrics(&s0, &sij, &tcs, &beta, &t).unwrap();
        assert_eq!(m.matching.perm, vec![2, 1, 0]);
        assert_eq!(m.matching.signs, vec![1.0, -1.0, 1.0]);
        assert!((m.subject_corr - 1.0).abs() < 1e-12 && (m.time_course_corr - 1.0).abs() < 1e-12);
        assert!(m.beta_mse < 1e-24);
    }
}
