//! Per-run metric records and their aggregation into summary tables.
//!
//! A results directory holds metric CSVs written by batch simulations
//! (one row per run and fitting mode) and calibration CSVs. `build_report`
//! reads every CSV in name order and produces mean (SD) tables, a timing
//! comparison when both modes are present, and the rejection-rate curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LicaError, Result};
use crate::simgen::{RecoveryRun, Scenario};

/// Prefix of the files `write_report` produces; skipped when reading.
pub const OUTPUT_PREFIX: &str = "summary_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub design: String,
    pub q: usize,
    pub n_subjects: usize,
    pub tau_sq: f64,
    pub mode: String,
    pub run: usize,
    pub seed: u64,
    pub population_corr: f64,
    pub subject_corr: f64,
    pub time_course_corr: f64,
    pub beta_mse: f64,
    pub iterations: usize,
    pub converged: bool,
    pub sec_per_iter: f64,
}

impl MetricRecord {
    pub fn from_recovery(design: &str, scn: &Scenario, run: usize, r: &RecoveryRun) -> Self {
        let secs = &r.fit.iteration_seconds;
        Self {
            design: design.to_string(),
            q: scn.q,
            n_subjects: scn.n_subjects,
            tau_sq: scn.tau_sq,
            mode: r.fit.mode.to_string(),
            run,
            seed: r.seed,
            population_corr: r.metrics.population_corr,
            subject_corr: r.metrics.subject_corr,
            time_course_corr: r.metrics.time_course_corr,
            beta_mse: r.metrics.beta_mse,
            iterations: r.fit.iterations,
            converged: r.fit.converged,
            sec_per_iter: secs.iter().sum::<f64>() / secs.len().max(1) as f64,
        }
    }
}

fn csv_err(e: csv::Error) -> LicaError {
    LicaError::Io(std::io::Error::other(e))
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(METRIC_COLUMNS).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

const METRIC_COLUMNS: [&str; 14] = [
    "design", "q", "n_subjects", "tau_sq", "mode", "run", "seed", "population_corr", "subject_corr",
    "time_course_corr", "beta_mse", "iterations", "converged", "sec_per_iter",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub test: String,
    pub effect: f64,
    pub alpha: f64,
    pub rate: f64,
    pub se: f64,
    pub n_runs: usize,
}

/// Sample mean and SD (n - 1 denominator; 0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
        Self { mean, sd }
    }

    pub fn cell(&self, digits: usize) -> String {
        format!("{:.*} ({:.*})", digits, self.mean, digits, self.sd)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub design: String,
    pub q: usize,
    pub n_subjects: usize,
    pub tau_sq: f64,
    pub mode: String,
    pub runs: usize,
    pub converged: usize,
    pub population_corr: MeanSd,
    pub subject_corr: MeanSd,
    pub time_course_corr: MeanSd,
    pub beta_mse: MeanSd,
    pub sec_per_iter: MeanSd,
}

/// Exact and subspace rows of one setting side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub design: String,
    pub q: usize,
    pub n_subjects: usize,
    pub tau_sq: f64,
    pub exact: SummaryRow,
    pub subspace: SummaryRow,
    /// Mean subspace over mean exact seconds per iteration.
    pub ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub summary: Vec<SummaryRow>,
    pub timing: Vec<TimingRow>,
    pub curves: Vec<CurveRow>,
    pub files_read: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

enum Kind {
    Metrics,
    Curves,
    Other,
}

fn classify(headers: &csv::StringRecord) -> Kind {
    let has = |c: &str| headers.iter().any(|h| h == c);
    if has("population_corr") && has("mode") {
        Kind::Metrics
    } else if has("test") && has("rate") && has("effect") {
        Kind::Curves
    } else {
        Kind::Other
    }
}

type GroupKey = (String, usize, usize, u64, String);

fn summarize(rows: &[&MetricRecord]) -> SummaryRow {
    let col = |f: fn(&MetricRecord) -> f64| MeanSd::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
    let r0 = rows[0];
    SummaryRow {
        design: r0.design.clone(),
        q: r0.q,
        n_subjects: r0.n_subjects,
        tau_sq: r0.tau_sq,
        mode: r0.mode.clone(),
        runs: rows.len(),
        converged: rows.iter().filter(|r| r.converged).count(),
        population_corr: col(|r| r.population_corr),
        subject_corr: col(|r| r.subject_corr),
        time_course_corr: col(|r| r.time_course_corr),
        beta_mse: col(|r| r.beta_mse),
        sec_per_iter: col(|r| r.sec_per_iter),
    }
}

/// Reads every CSV in `dir` (sorted by file name) and aggregates it.
pub fn build_report(dir: impl AsRef<Path>) -> Result<Report> {
    let dir = dir.as_ref();
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.retain(|p| {
        p.extension().is_some_and(|e| e == "csv")
            && !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(OUTPUT_PREFIX))
    });
    names.sort();

    let mut report = Report::default();
    let mut metrics: Vec<MetricRecord> = Vec::new();
    for path in names {
        let mut rdr = csv::Reader::from_path(&path).map_err(|e| LicaError::Format(format!("{}: {e}", path.display())))?;
        let headers = rdr.headers().map_err(|e| LicaError::Format(format!("{}: {e}", path.display())))?.clone();
        let bad = |e: csv::Error| LicaError::Format(format!("{}: {e}", path.display()));
        match classify(&headers) {
            Kind::Metrics => {
                for r in rdr.deserialize() {
                    metrics.push(r.map_err(bad)?);
                }
            }
            Kind::Curves => {
                for r in rdr.deserialize() {
                    report.curves.push(r.map_err(bad)?);
                }
            }
            Kind::Other => {
                report.warnings.push(format!("skipping {}: not a metrics or calibration CSV", path.display()));
                continue;
            }
        }
        report.files_read.push(path);
    }
    if report.files_read.is_empty() {
        report.warnings.push(format!("no metric CSVs in {}", dir.display()));
    }

    let mut groups: BTreeMap<GroupKey, Vec<&MetricRecord>> = BTreeMap::new();
    for r in &metrics {
        groups
            .entry((r.design.clone(), r.q, r.n_subjects, r.tau_sq.to_bits(), r.mode.clone()))
            .or_default()
            .push(r);
    }
    report.summary = groups.values().map(|rows| summarize(rows)).collect();

    for ex in report.summary.iter().filter(|s| s.mode == "exact") {
        let partner = report.summary.iter().find(|s| {
            s.mode == "subspace" && s.design == ex.design && s.q == ex.q && s.n_subjects == ex.n_subjects && s.tau_sq == ex.tau_sq
        });
        if let Some(sub) = partner {
            report.timing.push(TimingRow {
                design: ex.design.clone(),
                q: ex.q,
                n_subjects: ex.n_subjects,
                tau_sq: ex.tau_sq,
                exact: ex.clone(),
                subspace: sub.clone(),
                ratio: sub.sec_per_iter.mean / ex.sec_per_iter.mean,
            });
        }
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(report)
}

fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "design", "q", "N", "tau_sq", "mode", "runs", "converged", "population_corr", "subject_corr", "time_course_corr",
        "beta_mse", "sec_per_iter",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.design.clone(),
            r.q.to_string(),
            r.n_subjects.to_string(),
            r.tau_sq.to_string(),
            r.mode.clone(),
            r.runs.to_string(),
            r.converged.to_string(),
            r.population_corr.cell(3),
            r.subject_corr.cell(3),
            r.time_course_corr.cell(3),
            r.beta_mse.cell(3),
            r.sec_per_iter.cell(4),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| LicaError::Io(e.into_error()))
}

fn timing_csv(rows: &[TimingRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "design", "q", "N", "tau_sq", "exact_sec_per_iter", "subspace_sec_per_iter", "ratio", "exact_population_corr",
        "subspace_population_corr",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.design.clone(),
            r.q.to_string(),
            r.n_subjects.to_string(),
            r.tau_sq.to_string(),
            r.exact.sec_per_iter.cell(4),
            r.subspace.sec_per_iter.cell(4),
            format!("{:.3}", r.ratio),
            r.exact.population_corr.cell(3),
            r.subspace.population_corr.cell(3),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| LicaError::Io(e.into_error()))
}

fn curves_csv(rows: &[CurveRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| LicaError::Io(e.into_error()))
}

/// Rate against effect size, one polyline per (test, alpha).
pub fn curves_svg(rows: &[CurveRow]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let max_effect = rows.iter().map(|r| r.effect).fold(0.0f64, f64::max).max(1e-9);
    let px = |e: f64| pad + (w - 2.0 * pad) * e / max_effect;
    let py = |r: f64| h - pad - (h - 2.0 * pad) * r.clamp(0.0, 1.0);
    let mut series: BTreeMap<(String, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        series.entry((r.test.clone(), r.alpha.to_bits())).or_default().push((r.effect, r.rate));
    }
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" stroke="black" fill="none"/>"#,
        h - pad,
        w - pad
    );
    for (k, ((test, alpha), pts)) in series.iter_mut().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let d: Vec<String> = pts.iter().map(|(e, r)| format!("{:.1},{:.1}", px(*e), py(*r))).collect();
        let c = colors[k % colors.len()];
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{c}" fill="none"/>"#, d.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" fill="{c}">{test} a={}</text>"#,
            w - pad - 110.0,
            pad + 12.0 * k as f64,
            f64::from_bits(*alpha)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the summary files into `out` (atomically) and returns their paths.
pub fn write_report(report: &Report, out: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out = out.as_ref();
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = out.join(format!("{OUTPUT_PREFIX}{name}"));
        write_atomic(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    put("recovery.csv", &summary_csv(&report.summary)?)?;
    if !report.timing.is_empty() {
        put("timing.csv", &timing_csv(&report.timing)?)?;
    }
    if !report.curves.is_empty() {
        put("curves.csv", &curves_csv(&report.curves)?)?;
        put("curves.svg", curves_svg(&report.curves).as_bytes())?;
    }
    Ok(written)
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| LicaError::Argument(format!("bad output path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
