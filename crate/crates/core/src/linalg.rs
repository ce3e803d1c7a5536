//! Small dense linear-algebra helpers shared by the estimation modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{LicaError, Result};

/// Numerically stable `log(sum(exp(x)))`. Returns `-inf` for an empty slice
/// or when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Orthogonal polar factor of a square matrix: the orthogonal `Q` minimizing
/// `||Q - M||_F`, computed as `U V'` from the SVD.
pub fn polar_orthogonal(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err(LicaError::Numeric("non-finite entry in matrix to orthogonalize".into()));
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.ok_or_else(|| LicaError::Numeric("SVD failed (U)".into()))?;
    let v_t = svd.v_t.ok_or_else(|| LicaError::Numeric("SVD failed (V')".into()))?;
    Ok(u * v_t)
}

/// `M^{-1/2}` for a symmetric positive definite matrix.
pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam <= 0.0 || !lam.is_finite() {
            return Err(LicaError::Numeric(format!(
                "matrix not positive definite (eigenvalue {lam:e})"
            )));
        }
        let f = 1.0 / lam.sqrt();
        for r in 0..n {
            scaled[(r, k)] *= f;
        }
    }
    Ok(&scaled * eig.eigenvectors.transpose())
}

/// Cholesky with jitter escalation 1e-10 -> 1e-6 on the diagonal.
pub fn cholesky_jitter(m: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let scale = (0..m.nrows()).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let mut jitter = 1e-10;
    while jitter <= 1e-6 {
        let mut mj = m.clone();
        for i in 0..m.nrows() {
            mj[(i, i)] += jitter * scale;
        }
        if let Some(c) = mj.cholesky() {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(LicaError::Numeric("Cholesky failed after jitter escalation to 1e-6".into()))
}

/// Log-density of `N(mean, cov)` at `x`.
pub fn mvn_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky_jitter(cov)?;
    let diff = x - mean;
    let sol = chol.l().solve_lower_triangular(&diff).ok_or_else(|| {
        LicaError::Numeric("triangular solve failed".into())
    })?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let n = x.len() as f64;
    Ok(-0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + sol.norm_squared()))
}

/// Pearson correlation of two equally long slices. `None` if either is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Modified Gram-Schmidt on the columns, in order. Fails on a (near) dependent column.
pub fn orthonormalize_columns(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = m.clone();
    for k in 0..out.ncols() {
        for prev in 0..k {
            let proj = out.column(prev).dot(&out.column(k));
            let pc = out.column(prev).clone_owned();
            let mut col = out.column_mut(k);
            col.axpy(-proj, &pc, 1.0);
        }
        let norm = out.column(k).norm();
        if norm < 1e-12 {
            return Err(LicaError::Rank(format!("column {k} is linearly dependent")));
        }
        out.column_mut(k).scale_mut(1.0 / norm);
    }
    Ok(out)
}
