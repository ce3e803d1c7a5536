//! Python bindings: the CLI entry point plus a few numeric helpers that
//! take and return plain lists.

use lica::datamodel::load_dataset;
use lica::em::{fit, FitConfig};
use lica::inference::{adjust_pvalues, Correction};
use lica::preprocess::ppca_whiten;
use lica::{LicaError, PatternMode};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: LicaError) -> PyErr {
    match e {
        LicaError::Io(io) => PyIOError::new_err(io.to_string()),
        LicaError::Config(_) | LicaError::Argument(_) | LicaError::Format(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(data: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let ncols = data.first().map_or(0, |r| r.len());
    if data.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(data.len(), ncols, |i, j| data[i][j]))
}

#[pyfunction]
fn version() -> &'static str {
    lica::cli::VERSION
}

/// Runs a CLI command, e.g. `run(["fit", "--config", "fit.cfg", "--out", "o"])`.
/// Returns the exit status.
#[pyfunction]
fn run(py: Python<'_>, args: Vec<String>) -> i32 {
    let mut argv = vec!["lica".to_string()];
    argv.extend(args);
    py.allow_threads(|| lica::cli::main_with_args(argv))
}

/// PPCA whitening of a T x V block. Returns (q x V rows, sigma_tilde_sq, leading eigenvalues).
#[pyfunction]
fn whiten(data: Vec<Vec<f64>>, q: usize) -> PyResult<(Vec<Vec<f64>>, f64, Vec<f64>)> {
    let w = ppca_whiten(&from_rows(data)?, q).map_err(to_py)?;
    Ok((rows(&w.y), w.sigma_tilde_sq, w.lambda_q))
}

#[pyfunction]
#[pyo3(signature = (p, method = "bh", alpha = 0.05))]
fn adjust(p: Vec<f64>, method: &str, alpha: f64) -> PyResult<(Vec<f64>, Vec<bool>)> {
    let m: Correction = method.parse().map_err(to_py)?;
    Ok(adjust_pvalues(&p, m, alpha))
}

/// Fits a dataset container and returns a summary dict with the
/// population maps as a q x V list.
#[pyfunction]
#[pyo3(signature = (path, mode = "exact", seed = 0, max_iters = 500, epsilon = 1e-4))]
fn fit_file<'py>(
    py: Python<'py>,
    path: &str,
    mode: &str,
    seed: u64,
    max_iters: usize,
    epsilon: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let mode: PatternMode = mode.parse().map_err(to_py)?;
    let ds = load_dataset(path).map_err(to_py)?;
    let cfg = FitConfig { mode, max_iters, epsilon, ..FitConfig::default() };
    let res = py.allow_threads(|| fit(&ds, &cfg, seed)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("converged", res.converged)?;
    d.set_item("iterations", res.iterations)?;
    d.set_item("loglik", res.loglik_trace.clone())?;
    d.set_item("sigma0_sq", res.theta.sigma0_sq)?;
    d.set_item("tau_sq", res.theta.tau_sq)?;
    d.set_item("population_maps", rows(&res.moments.s0_map()))?;
    Ok(d)
}

#[pymodule]
fn pylica(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(whiten, m)?)?;
    m.add_function(wrap_pyfunction!(adjust, m)?)?;
    m.add_function(wrap_pyfunction!(fit_file, m)?)?;
    Ok(())
}
