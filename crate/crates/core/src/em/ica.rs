//! Symmetric fixed-point ICA with the tanh contrast, used to seed the EM.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{LicaError, Result};
use crate::linalg::polar_orthogonal;

#[derive(Debug, Clone)]
pub struct IcaOutcome {
    /// Orthogonal unmixing matrix W; sources are W Z.
    pub unmixing: DMatrix<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Runs FastICA on whitened rows `z` (q x V, unit covariance).
pub fn fastica(z: &DMatrix<f64>, max_sweeps: usize, tol: f64, rng: &mut ChaCha8Rng) -> Result<IcaOutcome> {
    let (q, nv) = z.shape();
    if nv == 0 {
        return Err(LicaError::Init("ICA on empty data".into()));
    }
    let init = DMatrix::from_fn(q, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut w = polar_orthogonal(&init)?;
    for sweep in 1..=max_sweeps {
        let wz = &w * z;
        let g = wz.map(f64::tanh);
        let mut gp_mean = vec![0.0; q];
        for r in 0..q {
            gp_mean[r] = g.row(r).iter().map(|t| 1.0 - t * t).sum::<f64>() / nv as f64;
        }
        let mut next = &g * z.transpose() / nv as f64;
        for r in 0..q {
            for c in 0..q {
                next[(r, c)] -= gp_mean[r] * w[(r, c)];
            }
        }
        let next = polar_orthogonal(&next)?;
        let change = (0..q)
            .map(|r| 1.0 - next.row(r).dot(&w.row(r)).abs())
            .fold(0.0, f64::max);
        w = next;
        if change < tol {
            return Ok(IcaOutcome { unmixing: w, sweeps: sweep, converged: true });
        }
    }
    log::warn!("ICA initialization did not converge in {max_sweeps} sweeps");
    Ok(IcaOutcome { unmixing: w, sweeps: max_sweeps, converged: false })
}
