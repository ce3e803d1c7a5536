//! Domain types, the dataset container, and the on-disk formats.
//!
//! Dataset container (version 1), all little-endian:
//!
//! ```text
//! b"LICA" | u32 version = 1
//! u64 N | u64 K | u64 T_original | u64 V | u64 rows | u64 p
//! covariates: N*p f64, row-major
//! blocks: for i in 0..N, j in 0..K: rows*V f64, row-major
//! u64 coord_dims (0 = no coordinates) | V*coord_dims i64
//! ```
//!
//! `rows` is q for preprocessed data and T for raw scans. Version 2 of the
//! same container holds a list of named f64 matrices (fit results, maps,
//! ground truth); see [`Container`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{LicaError, Result};

pub const MAGIC: &[u8; 4] = b"LICA";
pub const DATASET_VERSION: u32 = 1;
pub const CONTAINER_VERSION: u32 = 2;

/// Repeated-measures data: one `rows x V` block per (subject, visit) plus
/// per-subject covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    pub n_subjects: usize,
    pub n_visits: usize,
    /// Scan length before dimension reduction (0 if unknown).
    pub t_original: usize,
    /// Blocks in (i, j) lexicographic order, index `i * K + j`.
    pub blocks: Vec<DMatrix<f64>>,
    /// N x p; row i is x_i.
    pub covariates: DMatrix<f64>,
    pub voxel_coords: Option<Vec<[i64; 3]>>,
}

impl LongitudinalDataset {
    pub fn new(
        n_subjects: usize,
        n_visits: usize,
        t_original: usize,
        blocks: Vec<DMatrix<f64>>,
        covariates: DMatrix<f64>,
    ) -> Result<Self> {
        let ds = Self { n_subjects, n_visits, t_original, blocks, covariates, voxel_coords: None };
        let violations = validate(&ds);
        if let Some(v) = violations.first() {
            return Err(LicaError::Argument(format!(
                "invalid dataset ({} violations, first: {v})",
                violations.len()
            )));
        }
        Ok(ds)
    }

    pub fn with_coords(mut self, coords: Vec<[i64; 3]>) -> Result<Self> {
        if coords.len() != self.n_voxels() {
            return Err(LicaError::Argument(format!(
                "{} voxel coordinates for {} voxels",
                coords.len(),
                self.n_voxels()
            )));
        }
        self.voxel_coords = Some(coords);
        Ok(self)
    }

    /// Rows per block (q for preprocessed data).
    pub fn q(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.nrows())
    }

    pub fn n_voxels(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.ncols())
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn block(&self, i: usize, j: usize) -> &DMatrix<f64> {
        &self.blocks[i * self.n_visits + j]
    }

    /// Stacked observation vector y(v) over (i, j), length N*K*q.
    pub fn voxel(&self, v: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.blocks.len() * self.q());
        for b in &self.blocks {
            out.extend_from_slice(b.column(v).as_slice());
        }
        out
    }
}

/// One invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: &'static str,
    /// Offending index; meaning depends on the field (e.g. `[i, j, row, v]`).
    pub index: Vec<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{:?}: {}", self.field, self.index, self.message)
    }
}

/// Checks every dataset invariant; an empty list means the dataset is valid.
pub fn validate(ds: &LongitudinalDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let expected = ds.n_subjects * ds.n_visits;
    if ds.n_subjects == 0 || ds.n_visits == 0 {
        out.push(Violation {
            field: "dims",
            index: vec![ds.n_subjects, ds.n_visits],
            message: "N and K must be positive".into(),
        });
    }
    if ds.blocks.len() != expected {
        out.push(Violation {
            field: "data",
            index: vec![ds.blocks.len()],
            message: format!("expected {expected} (subject, visit) blocks"),
        });
    }
    let (rows, cols) = ds.blocks.first().map_or((0, 0), |b| b.shape());
    for (idx, b) in ds.blocks.iter().enumerate() {
        let (i, j) = (idx / ds.n_visits.max(1), idx % ds.n_visits.max(1));
        if b.shape() != (rows, cols) {
            out.push(Violation {
                field: "data",
                index: vec![i, j],
                message: format!("block shape {:?} differs from {:?}", b.shape(), (rows, cols)),
            });
            continue;
        }
        for v in 0..b.ncols() {
            for r in 0..b.nrows() {
                if !b[(r, v)].is_finite() {
                    out.push(Violation {
                        field: "data",
                        index: vec![i, j, r, v],
                        message: format!("non-finite value {}", b[(r, v)]),
                    });
                }
            }
        }
    }
    if ds.covariates.nrows() != ds.n_subjects {
        out.push(Violation {
            field: "covariates",
            index: vec![ds.covariates.nrows()],
            message: format!("expected {} rows", ds.n_subjects),
        });
    }
    for r in 0..ds.covariates.nrows() {
        for c in 0..ds.covariates.ncols() {
            if !ds.covariates[(r, c)].is_finite() {
                out.push(Violation {
                    field: "covariates",
                    index: vec![r, c],
                    message: "non-finite value".into(),
                });
            }
        }
    }
    if let Some(coords) = &ds.voxel_coords {
        if coords.len() != cols {
            out.push(Violation {
                field: "voxel_coords",
                index: vec![coords.len()],
                message: format!("expected {cols} coordinates"),
            });
        }
    }
    out
}

/// Per-IC mixture-of-Gaussians parameters; component 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct IcMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl IcMixture {
    pub fn m(&self) -> usize {
        self.weights.len()
    }

    /// Reorders components by |mean| ascending (background first). Stable.
    pub fn sort_background_first(&mut self) {
        let mut idx: Vec<usize> = (0..self.m()).collect();
        idx.sort_by(|&a, &b| self.means[a].abs().total_cmp(&self.means[b].abs()));
        self.weights = idx.iter().map(|&k| self.weights[k]).collect();
        self.means = idx.iter().map(|&k| self.means[k]).collect();
        self.variances = idx.iter().map(|&k| self.variances[k]).collect();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MogParams {
    pub ics: Vec<IcMixture>,
}

impl MogParams {
    pub fn m(&self) -> usize {
        self.ics.first().map_or(0, |c| c.m())
    }

    pub fn q(&self) -> usize {
        self.ics.len()
    }
}

/// All estimable parameters of the two-level model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Visit effects, one q x V matrix per visit; `alpha[0]` is identically 0.
    pub alpha: Vec<DMatrix<f64>>,
    /// Covariate effects, one (p*q) x V matrix per visit; row `k*q + l` holds
    /// the effect of covariate k on IC l.
    pub beta: Vec<DMatrix<f64>>,
    /// Orthogonal q x q mixing matrices, index `i * K + j`.
    pub mixing: Vec<DMatrix<f64>>,
    pub sigma0_sq: f64,
    /// Diagonal of D (subject random-effect variances).
    pub d: Vec<f64>,
    pub tau_sq: f64,
    pub mog: MogParams,
}

impl ModelParams {
    pub fn q(&self) -> usize {
        self.d.len()
    }

    pub fn n_visits(&self) -> usize {
        self.alpha.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.mixing.len() / self.n_visits().max(1)
    }

    pub fn n_voxels(&self) -> usize {
        self.alpha.first().map_or(0, |a| a.ncols())
    }

    pub fn n_covariates(&self) -> usize {
        self.beta.first().map_or(0, |b| b.nrows()) / self.q().max(1)
    }

    /// `C_j(v) x_i*` for covariate row `x`: alpha_j(v) + beta_j(v)' x.
    pub fn fixed_effect(&self, j: usize, v: usize, x: &[f64], out: &mut [f64]) {
        let q = self.q();
        for l in 0..q {
            let mut acc = self.alpha[j][(l, v)];
            for (k, xk) in x.iter().enumerate() {
                acc += self.beta[j][(k * q + l, v)] * xk;
            }
            out[l] = acc;
        }
    }

    /// Concatenated parameter vector used by the convergence rule.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for a in &self.alpha {
            out.extend(a.iter());
        }
        for b in &self.beta {
            out.extend(b.iter());
        }
        for a in &self.mixing {
            out.extend(a.iter());
        }
        out.push(self.sigma0_sq);
        out.extend(&self.d);
        out.push(self.tau_sq);
        for ic in &self.mog.ics {
            out.extend(&ic.weights);
            out.extend(&ic.means);
            out.extend(&ic.variances);
        }
        out
    }

    /// Max deviation of any `A_ij' A_ij` from the identity.
    pub fn max_orthogonality_error(&self) -> f64 {
        self.mixing
            .iter()
            .map(|a| (a.transpose() * a - DMatrix::<f64>::identity(a.nrows(), a.nrows())).amax())
            .fold(0.0, f64::max)
    }
}

/// Linear hypothesis `l' C*(v) = 0` over the stacked effect vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Contrast {
    pub label: String,
    pub coefficients: Vec<f64>,
}

impl Contrast {
    pub fn new(label: impl Into<String>, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.iter().all(|c| *c == 0.0) {
            return Err(LicaError::Argument("contrast is all zero".into()));
        }
        if !coefficients.iter().all(|c| c.is_finite()) {
            return Err(LicaError::Argument("contrast has non-finite coefficients".into()));
        }
        Ok(Self { label: label.into(), coefficients })
    }

    /// Length of C*(v): qK visit slots plus qKp covariate effects.
    pub fn stacked_dim(q: usize, n_visits: usize, p: usize) -> usize {
        q * n_visits + q * n_visits * p
    }

    /// Index of alpha*_j(v)[l] (visit 0 slot holds the baseline mean).
    pub fn visit_index(q: usize, j: usize, l: usize) -> usize {
        j * q + l
    }

    /// Index of beta_j(v)[k, l] in C*(v).
    pub fn beta_index(q: usize, n_visits: usize, p: usize, j: usize, k: usize, l: usize) -> usize {
        q * n_visits + j * q * p + k * q + l
    }
}

fn write_u32(w: &mut impl Write, x: u32) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, x: u64) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, xs: impl Iterator<Item = f64>) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |r| (0..m.ncols()).map(move |c| m[(r, c)]))
}

/// Cursor over an in-memory payload with format-error reporting.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(LicaError::Format(format!(
                "payload too short while reading {what} (need {n} bytes at offset {}, have {})",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| LicaError::Format(format!("{what} overflows")))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| LicaError::Format(format!("{what} size overflows")))?;
        let bytes = self.take(n, what)?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(DMatrix::from_row_slice(rows, cols, &vals))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(LicaError::Format(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn read_header(buf: &[u8]) -> Result<(Cursor<'_>, u32)> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(LicaError::Format(format!("bad magic {magic:?}")));
    }
    let version = cur.u32("version")?;
    Ok((cur, version))
}

pub fn encode_dataset(ds: &LongitudinalDataset) -> Result<Vec<u8>> {
    let mut w = Vec::new();
    w.write_all(MAGIC)?;
    write_u32(&mut w, DATASET_VERSION)?;
    for x in [ds.n_subjects, ds.n_visits, ds.t_original, ds.n_voxels(), ds.q(), ds.n_covariates()] {
        write_u64(&mut w, x as u64)?;
    }
    write_f64s(&mut w, row_major(&ds.covariates))?;
    for b in &ds.blocks {
        write_f64s(&mut w, row_major(b))?;
    }
    match &ds.voxel_coords {
        None => write_u64(&mut w, 0)?,
        Some(coords) => {
            write_u64(&mut w, 3)?;
            for c in coords {
                for x in c {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    Ok(w)
}

pub fn decode_dataset(buf: &[u8]) -> Result<LongitudinalDataset> {
    let (mut cur, version) = read_header(buf)?;
    if version != DATASET_VERSION {
        return Err(LicaError::UnsupportedVersion(version));
    }
    let n = cur.usize("N")?;
    let k = cur.usize("K")?;
    let t = cur.usize("T_original")?;
    let v = cur.usize("V")?;
    let rows = cur.usize("q")?;
    let p = cur.usize("p")?;
    let covariates = cur.matrix(n, p, "covariates")?;
    let mut blocks = Vec::with_capacity(n * k);
    for i in 0..n {
        for j in 0..k {
            blocks.push(cur.matrix(rows, v, &format!("data block (subject {i}, visit {j})"))?);
        }
    }
    let dims = cur.usize("coordinate dims")?;
    let voxel_coords = match dims {
        0 => None,
        3 => {
            let mut coords = Vec::with_capacity(v);
            for _ in 0..v {
                let mut c = [0i64; 3];
                for x in c.iter_mut() {
                    *x = i64::from_le_bytes(cur.take(8, "voxel coordinates")?.try_into().unwrap());
                }
                coords.push(c);
            }
            Some(coords)
        }
        d => return Err(LicaError::Format(format!("unsupported coordinate dimension {d}"))),
    };
    cur.done()?;
    Ok(LongitudinalDataset { n_subjects: n, n_visits: k, t_original: t, blocks, covariates, voxel_coords })
}

pub fn save_dataset(ds: &LongitudinalDataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LongitudinalDataset> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    decode_dataset(&buf)
}

/// Named f64 matrices in the version-2 container layout:
/// `u32 count`, then per entry `u32 name_len | name | u64 rows | u64 cols | rows*cols f64 (row-major)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<(String, DMatrix<f64>)>,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, m: DMatrix<f64>) {
        self.entries.push((name.into(), m));
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, x: f64) {
        self.push(name, DMatrix::from_element(1, 1, x));
    }

    pub fn push_vec(&mut self, name: impl Into<String>, xs: &[f64]) {
        self.push(name, DMatrix::from_row_slice(1, xs.len(), xs));
    }

    pub fn get(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| LicaError::Format(format!("container has no entry '{name}'")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let m = self.get(name)?;
        if m.len() != 1 {
            return Err(LicaError::Format(format!("entry '{name}' is not a scalar")));
        }
        Ok(m[(0, 0)])
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.write_all(MAGIC)?;
        write_u32(&mut w, CONTAINER_VERSION)?;
        write_u32(&mut w, self.entries.len() as u32)?;
        for (name, m) in &self.entries {
            write_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            write_u64(&mut w, m.nrows() as u64)?;
            write_u64(&mut w, m.ncols() as u64)?;
            write_f64s(&mut w, row_major(m))?;
        }
        Ok(w)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let (mut cur, version) = read_header(buf)?;
        if version != CONTAINER_VERSION {
            return Err(LicaError::UnsupportedVersion(version));
        }
        let count = cur.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cur.u32("name length")? as usize;
            let name = std::str::from_utf8(cur.take(len, "name")?)
                .map_err(|e| LicaError::Format(format!("entry name is not UTF-8: {e}")))?
                .to_string();
            let rows = cur.usize("rows")?;
            let cols = cur.usize("cols")?;
            let m = cur.matrix(rows, cols, &name)?;
            entries.push((name, m));
        }
        cur.done()?;
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(&self.encode()?)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
        Self::decode(&buf)
    }
}

/// Reads a covariate CSV: header row, subject id in the first column, then
/// one numeric column per covariate. Returns (ids, N x p matrix).
pub fn read_covariates_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| LicaError::Format(format!("covariate CSV: {e}")))?;
    let headers = rdr.headers().map_err(|e| LicaError::Format(e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(LicaError::Format("covariate CSV has no header".into()));
    }
    let p = headers.len() - 1;
    let mut ids = Vec::new();
    let mut vals = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| LicaError::Format(format!("covariate CSV line {}: {e}", line + 2)))?;
        if rec.len() != p + 1 {
            return Err(LicaError::Format(format!(
                "covariate CSV line {}: expected {} fields, got {}",
                line + 2,
                p + 1,
                rec.len()
            )));
        }
        ids.push(rec[0].to_string());
        for f in rec.iter().skip(1) {
            vals.push(f.parse::<f64>().map_err(|e| {
                LicaError::Format(format!("covariate CSV line {}: '{f}': {e}", line + 2))
            })?);
        }
    }
    Ok((ids.clone(), DMatrix::from_row_slice(ids.len(), p, &vals)))
}
