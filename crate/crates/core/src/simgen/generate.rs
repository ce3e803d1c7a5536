//! Forward simulation of the two-level model.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datamodel::{IcMixture, LongitudinalDataset, ModelParams, MogParams};
use crate::em::mstep::VARIANCE_FLOOR;
use crate::error::Result;
use crate::linalg::{cholesky_jitter, polar_orthogonal, sym_inv_sqrt};
use crate::simgen::scenario::Scenario;

const STREAM_COVARIATES: u64 = 0;
const STREAM_S0: u64 = 1;
const STREAM_BETA: u64 = 2;
const STREAM_B: u64 = 3;
const STREAM_GAMMA: u64 = 4;
const STREAM_MIXING: u64 = 5;
const STREAM_NOISE: u64 = 1000;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Everything the generator drew, in model coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub s0: DMatrix<f64>,
    /// q x V per visit.
    pub alpha: Vec<DMatrix<f64>>,
    /// (p*q) x V per visit, row `k*q + l`.
    pub beta: Vec<DMatrix<f64>>,
    /// q x V per subject.
    pub b: Vec<DMatrix<f64>>,
    /// q x V per (i, j), index `i*K + j`.
    pub s: Vec<DMatrix<f64>>,
    /// Per (i, j): T x q orthonormal time courses for raw data, or the
    /// q x q orthogonal mixing matrix for reduced data.
    pub mixing: Vec<DMatrix<f64>>,
    pub covariates: DMatrix<f64>,
    /// Active-region membership, q x V.
    pub masks: Vec<Vec<bool>>,
    pub coords: Vec<[i64; 3]>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl GroundTruth {
    /// Re-draws the observation noise of block `ij` exactly as the generator did.
    pub fn noise_block(&self, ij: usize, rows: usize) -> DMatrix<f64> {
        let mut rng = stream(self.seed, STREAM_NOISE + ij as u64);
        let v = self.s0.ncols();
        let mut out = DMatrix::zeros(rows, v);
        for c in 0..v {
            for r in 0..rows {
                out[(r, c)] = self.noise_sd * normal(&mut rng);
            }
        }
        out
    }

    /// Noise-free block `mixing[ij] * s[ij]`.
    pub fn signal_block(&self, ij: usize) -> DMatrix<f64> {
        &self.mixing[ij] * &self.s[ij]
    }

    /// True parameter values for data from [`generate_reduced`]; the MoG is
    /// the two-component background/activation mixture.
    pub fn model_params(&self, scn: &Scenario) -> ModelParams {
        let q = scn.q;
        let nv = self.s0.ncols();
        let ics = (0..q)
            .map(|l| {
                let frac = self.masks[l].iter().filter(|&&a| a).count() as f64 / nv as f64;
                let mut ic = IcMixture {
                    weights: vec![1.0 - frac, frac],
                    means: vec![0.0, scn.activation_mean],
                    variances: vec![
                        (scn.background_sd * scn.background_sd).max(VARIANCE_FLOOR),
                        (scn.activation_sd * scn.activation_sd).max(VARIANCE_FLOOR),
                    ],
                };
                ic.sort_background_first();
                ic
            })
            .collect();
        ModelParams {
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            mixing: self.mixing.clone(),
            sigma0_sq: scn.sigma0_sq.max(VARIANCE_FLOOR),
            d: scn.d.iter().map(|x| x.max(VARIANCE_FLOOR)).collect(),
            tau_sq: scn.tau_sq.max(VARIANCE_FLOOR),
            mog: MogParams { ics },
        }
    }
}

/// Grid coordinates with x varying fastest.
pub fn grid_coords(grid: [usize; 3]) -> Vec<[i64; 3]> {
    let mut out = Vec::with_capacity(grid.iter().product());
    for z in 0..grid[2] {
        for y in 0..grid[1] {
            for x in 0..grid[0] {
                out.push([x as i64, y as i64, z as i64]);
            }
        }
    }
    out
}

/// Squared-exponential field over the in-plane footprint of a mask; the
/// same value is used in every slice.
fn smooth_field(
    coords: &[[i64; 3]],
    mask: &[bool],
    mean: f64,
    sd: f64,
    length: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; coords.len()];
    let mut points: Vec<[i64; 2]> = coords
        .iter()
        .zip(mask)
        .filter(|(_, &a)| a)
        .map(|(c, _)| [c[0], c[1]])
        .collect();
    points.sort_unstable();
    points.dedup();
    if points.is_empty() {
        return Ok(out);
    }
    let np = points.len();
    let mut draw = vec![0.0; np];
    if sd > 0.0 {
        let kern = DMatrix::from_fn(np, np, |a, b| {
            let dx = (points[a][0] - points[b][0]) as f64;
            let dy = (points[a][1] - points[b][1]) as f64;
            sd * sd * (-(dx * dx + dy * dy) / (2.0 * length * length)).exp()
        });
        let chol = cholesky_jitter(&kern)?;
        let z = nalgebra::DVector::from_fn(np, |_, _| normal(rng));
        let f = chol.l() * z;
        draw.copy_from_slice(f.as_slice());
    }
    for (v, c) in coords.iter().enumerate() {
        if mask[v] {
            let k = points.binary_search(&[c[0], c[1]]).expect("footprint point");
            out[v] = mean + draw[k];
        }
    }
    Ok(out)
}

/// Draws all latent quantities (everything except mixing and noise).
fn latent(scn: &Scenario) -> Result<GroundTruth> {
    scn.validate()?;
    let (n, k, q) = (scn.n_subjects, scn.n_visits, scn.q);
    let coords = grid_coords(scn.grid);
    let nv = coords.len();
    let masks: Vec<Vec<bool>> = scn
        .regions
        .iter()
        .map(|r| coords.iter().map(|c| r.contains([c[0] as usize, c[1] as usize, c[2] as usize])).collect())
        .collect();

    let p = scn.n_covariates();
    let mut rng = stream(scn.seed, STREAM_COVARIATES);
    let covariates = DMatrix::from_fn(n, p, |_, _| {
        let u: f64 = rng.random();
        if u < scn.covariate_prob.unwrap_or(0.0) { 1.0 } else { 0.0 }
    });

    let mut rng = stream(scn.seed, STREAM_S0);
    let mut s0 = DMatrix::zeros(q, nv);
    for v in 0..nv {
        for l in 0..q {
            let z = normal(&mut rng);
            s0[(l, v)] = if masks[l][v] {
                scn.activation_mean + scn.activation_sd * z
            } else {
                scn.background_sd * z
            };
        }
    }

    let alpha: Vec<DMatrix<f64>> = (0..k)
        .map(|j| DMatrix::from_fn(q, nv, |l, v| if masks[l][v] { scn.alpha[j] } else { 0.0 }))
        .collect();

    let mut rng = stream(scn.seed, STREAM_BETA);
    let mut beta = vec![DMatrix::zeros(p * q, nv); k];
    for (j, bj) in beta.iter_mut().enumerate() {
        for kk in 0..p {
            for l in 0..q {
                if !scn.beta_ics.is_empty() && !scn.beta_ics.contains(&l) {
                    continue;
                }
                let length = (scn.beta_length_frac * scn.regions[l].diameter()).max(1e-6);
                let field = smooth_field(&coords, &masks[l], scn.beta_mean[j], scn.beta_sd, length, &mut rng)?;
                for v in 0..nv {
                    bj[(kk * q + l, v)] = field[v];
                }
            }
        }
    }

    let mut rng = stream(scn.seed, STREAM_B);
    let b: Vec<DMatrix<f64>> = (0..n)
        .map(|_| {
            let mut m = DMatrix::zeros(q, nv);
            for v in 0..nv {
                for l in 0..q {
                    m[(l, v)] = scn.d[l].sqrt() * normal(&mut rng);
                }
            }
            m
        })
        .collect();

    let mut rng = stream(scn.seed, STREAM_GAMMA);
    let tau = scn.tau_sq.sqrt();
    let mut s = Vec::with_capacity(n * k);
    for i in 0..n {
        for j in 0..k {
            let mut m = &s0 + &b[i] + &alpha[j];
            for v in 0..nv {
                for l in 0..q {
                    let mut fx = 0.0;
                    for kk in 0..p {
                        fx += beta[j][(kk * q + l, v)] * covariates[(i, kk)];
                    }
                    m[(l, v)] += fx + tau * normal(&mut rng);
                }
            }
            s.push(m);
        }
    }

    Ok(GroundTruth {
        s0,
        alpha,
        beta,
        b,
        s,
        mixing: Vec::new(),
        covariates,
        masks,
        coords,
        noise_sd: scn.sigma0_sq.sqrt(),
        seed: scn.seed,
    })
}

/// Centred, orthonormalised band-limited time courses, T x q.
fn time_courses(scn: &Scenario, freqs: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let tc = &scn.time_courses;
    let t = tc.length;
    let mut m = DMatrix::zeros(t, scn.q);
    let innov = tc.ar_sd * (1.0 - tc.ar_rho * tc.ar_rho).max(0.0).sqrt();
    for l in 0..scn.q {
        let phases: Vec<f64> = (0..tc.n_sinusoids).map(|_| rng.random::<f64>() * 2.0 * std::f64::consts::PI).collect();
        let mut e = tc.ar_sd * normal(rng);
        for step in 0..t {
            let time = step as f64 * tc.tr;
            let mut x = 0.0;
            for (f, ph) in freqs[l].iter().zip(&phases) {
                x += (2.0 * std::f64::consts::PI * f * time + ph).sin();
            }
            if step > 0 {
                e = tc.ar_rho * e + innov * normal(rng);
            }
            m[(step, l)] = x + e;
        }
    }
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let gram = m.transpose() * &m;
    Ok(&m * sym_inv_sqrt(&gram)?)
}

/// Raw T x V scans per (subject, visit): orthonormal time courses times
/// the subject/visit maps plus Gaussian noise.
pub fn generate(scn: &Scenario) -> Result<(LongitudinalDataset, GroundTruth)> {
    let mut truth = latent(scn)?;
    let mut rng = stream(scn.seed, STREAM_MIXING);
    let tc = &scn.time_courses;
    let freqs: Vec<Vec<f64>> = (0..scn.q)
        .map(|_| (0..tc.n_sinusoids).map(|_| tc.band.0 + (tc.band.1 - tc.band.0) * rng.random::<f64>()).collect())
        .collect();
    let mut blocks = Vec::with_capacity(truth.s.len());
    for ij in 0..truth.s.len() {
        let m = time_courses(scn, &freqs, &mut rng)?;
        truth.mixing.push(m);
        blocks.push(truth.signal_block(ij) + truth.noise_block(ij, tc.length));
    }
    let ds = LongitudinalDataset::new(scn.n_subjects, scn.n_visits, tc.length, blocks, truth.covariates.clone())?
        .with_coords(truth.coords.clone())?;
    Ok((ds, truth))
}

/// Data already in reduced q x V form: y_ij = A_ij s_ij + e with Haar
/// random orthogonal A_ij.
pub fn generate_reduced(scn: &Scenario) -> Result<(LongitudinalDataset, GroundTruth)> {
    let mut truth = latent(scn)?;
    let mut rng = stream(scn.seed, STREAM_MIXING);
    let q = scn.q;
    let mut blocks = Vec::with_capacity(truth.s.len());
    for ij in 0..truth.s.len() {
        let g = DMatrix::from_fn(q, q, |_, _| normal(&mut rng));
        truth.mixing.push(polar_orthogonal(&g)?);
        blocks.push(truth.signal_block(ij) + truth.noise_block(ij, q));
    }
    let ds = LongitudinalDataset::new(scn.n_subjects, scn.n_visits, q, blocks, truth.covariates.clone())?
        .with_coords(truth.coords.clone())?;
    Ok((ds, truth))
}
