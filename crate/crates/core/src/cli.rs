//! Command-line front end. Each subcommand reads a `key = value` config,
//! writes its outputs into `--out`, and records a `manifest.json` next to
//! them. Failures leave an `error.json` and a nonzero exit status.

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::datamodel::{encode_dataset, load_dataset, read_covariates_csv, Container, LongitudinalDataset};
use crate::em::{estep_all, fit, theta_from_container, FitConfig, FitResult, InitConfig, PatternCache, PosteriorMoments};
use crate::error::{LicaError, Result};
use crate::inference::{infer, load_contrasts, write_inference_csv, Correction, InferenceOptions, SigmaChoice};
use crate::patterns::{enumerate_patterns, PatternMode};
use crate::predict::{extract_trends, predict_subpopulation, write_map_csv, write_trends_csv};
use crate::preprocess::{reduce_dataset, ReduceMethod};
use crate::report::{build_report, write_atomic, write_metrics_csv, write_report, MetricRecord};
use crate::simgen::{generate, run_recovery, run_test_calibration, CalibrationConfig, GroundTruth, Scenario};
use crate::ModelParams;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable that overrides the worker count.
pub const WORKERS_ENV: &str = "LICA_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "lica", version, about = "Longitudinal ICA: simulate, preprocess, fit, infer, predict, report")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset, or run a batch of recovery replicates.
    Simulate(Common),
    /// Reduce raw blocks to q rows (PPCA whitening or projection).
    Preprocess(Common),
    /// Fit the model by EM.
    Fit(Common),
    /// Voxel-wise contrast tests.
    Infer(Common),
    /// Subpopulation maps and trends.
    Predict(Common),
    /// Aggregate metric CSVs into summary tables.
    Report(Common),
    /// Type-I error and power study.
    Calibrate(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub mode: Option<PatternMode>,
    #[arg(long)]
    pub out: PathBuf,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Preprocess(_) => "preprocess",
            Command::Fit(_) => "fit",
            Command::Infer(_) => "infer",
            Command::Predict(_) => "predict",
            Command::Report(_) => "report",
            Command::Calibrate(_) => "calibrate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Simulate(c)
            | Command::Preprocess(c)
            | Command::Fit(c)
            | Command::Infer(c)
            | Command::Predict(c)
            | Command::Report(c)
            | Command::Calibrate(c) => c,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config_sha256: String,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub version: String,
    pub wall_seconds: f64,
    pub workers: usize,
}

#[derive(Debug, Serialize)]
struct ErrorRecord<'a> {
    command: &'a str,
    kind: &'a str,
    message: String,
    exit_code: i32,
}

pub fn exit_code(e: &LicaError) -> i32 {
    match e {
        LicaError::Config(_) => 2,
        LicaError::Io(_) => 3,
        LicaError::Format(_) | LicaError::UnsupportedVersion(_) => 4,
        _ => 1,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let name = cli.command.name();
    let out = cli.command.common().out.clone();
    match execute(&cli.command) {
        Ok(_) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("lica {name}: {e}");
            let rec = ErrorRecord { command: name, kind: e.kind(), message: e.to_string(), exit_code: code };
            if std::fs::create_dir_all(&out).is_ok() {
                if let Ok(bytes) = serde_json::to_vec_pretty(&rec) {
                    let _ = write_atomic(&out.join("error.json"), &bytes);
                }
            }
            code
        }
    }
}

struct Ctx {
    cfg: Config,
    seed: u64,
    out: PathBuf,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Ctx {
    fn input(&mut self, key: &str) -> Result<PathBuf> {
        let p = self
            .cfg
            .get(key)
            .ok_or_else(|| LicaError::Config(format!("missing required key '{key}'")))?;
        let p = PathBuf::from(p);
        if !p.exists() {
            return Err(LicaError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("input '{key}' not found: {}", p.display()),
            )));
        }
        self.inputs.push(p.display().to_string());
        Ok(p)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.out.join(name);
        write_atomic(&p, bytes)?;
        self.outputs.push(p.display().to_string());
        Ok(())
    }

    fn write_csv(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }
}

const FIT_KEYS: &[&str] = &[
    "mode", "m", "epsilon", "max_iters", "pattern_budget", "allow_over_budget", "mixing_update", "init.ica_max_sweeps",
    "init.ica_tol", "init.procrustes_rounds", "init.noise_fraction",
];

fn fit_config(cfg: &Config) -> Result<FitConfig> {
    let d = FitConfig::default();
    let di = InitConfig::default();
    Ok(FitConfig {
        mode: cfg.value_or("mode", d.mode)?,
        q: 0,
        m: cfg.value_or("m", d.m)?,
        epsilon: cfg.value_or("epsilon", d.epsilon)?,
        max_iters: cfg.value_or("max_iters", d.max_iters)?,
        pattern_budget: cfg.value_or("pattern_budget", d.pattern_budget)?,
        allow_over_budget: cfg.value_or("allow_over_budget", d.allow_over_budget)?,
        workers: 0,
        mixing_update: cfg.value_or("mixing_update", d.mixing_update)?,
        init: InitConfig {
            ica_max_sweeps: cfg.value_or("init.ica_max_sweeps", di.ica_max_sweeps)?,
            ica_tol: cfg.value_or("init.ica_tol", di.ica_tol)?,
            procrustes_rounds: cfg.value_or("init.procrustes_rounds", di.procrustes_rounds)?,
            noise_fraction: cfg.value_or("init.noise_fraction", di.noise_fraction)?,
        },
    })
}

fn allowed(base: &[&'static str], extra: &[&'static str]) -> Vec<&'static str> {
    let mut v: Vec<&'static str> = base.to_vec();
    v.extend_from_slice(extra);
    v.extend_from_slice(&["seed", "workers"]);
    v
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn resolve_workers(common: &Common, cfg: &Config) -> Result<usize> {
    if let Some(w) = common.workers {
        return Ok(w);
    }
    if let Ok(s) = std::env::var(WORKERS_ENV) {
        return s
            .trim()
            .parse()
            .map_err(|e| LicaError::Config(format!("bad {WORKERS_ENV} value '{s}': {e}")));
    }
    cfg.value_or("workers", 0usize)
}

/// Runs one command and returns its manifest.
pub fn execute(command: &Command) -> Result<RunManifest> {
    let common = command.common();
    let start = Instant::now();
    let (mut cfg, cfg_bytes) = match &common.config {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| {
                LicaError::Io(std::io::Error::new(e.kind(), format!("config {}: {e}", p.display())))
            })?;
            let text = String::from_utf8(bytes.clone())
                .map_err(|_| LicaError::Config(format!("config {} is not UTF-8", p.display())))?;
            (Config::parse(&text)?, bytes)
        }
        None => (Config::default(), Vec::new()),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| LicaError::Config(format!("override '{kv}' is not key=value")))?;
        cfg.set(k.trim(), v.trim());
    }
    if let Some(m) = common.mode {
        cfg.set("mode", m.to_string());
    }
    let seed = match common.seed {
        Some(s) => s,
        None => cfg.value_or("seed", 0u64)?,
    };
    let workers = resolve_workers(common, &cfg)?;
    std::fs::create_dir_all(&common.out)?;
    let mut ctx = Ctx { cfg, seed, out: common.out.clone(), inputs: Vec::new(), outputs: Vec::new() };

    let run = |ctx: &mut Ctx| match command {
        Command::Simulate(_) => cmd_simulate(ctx),
        Command::Preprocess(_) => cmd_preprocess(ctx),
        Command::Fit(_) => cmd_fit(ctx),
        Command::Infer(_) => cmd_infer(ctx),
        Command::Predict(_) => cmd_predict(ctx),
        Command::Report(_) => cmd_report(ctx),
        Command::Calibrate(_) => cmd_calibrate(ctx),
    };
    if workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| LicaError::Config(format!("cannot build worker pool: {e}")))?;
        pool.install(|| run(&mut ctx))?;
    } else {
        run(&mut ctx)?;
    }

    let manifest = RunManifest {
        command: command.name().to_string(),
        config_path: common.config.as_ref().map(|p| p.display().to_string()),
        config_sha256: sha256_hex(&cfg_bytes),
        overrides: common.set.clone(),
        seed,
        inputs: ctx.inputs,
        outputs: ctx.outputs,
        version: VERSION.to_string(),
        wall_seconds: start.elapsed().as_secs_f64(),
        workers: if workers > 0 { workers } else { rayon::current_num_threads() },
    };
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| LicaError::Format(e.to_string()))?;
    write_atomic(&common.out.join("manifest.json"), &bytes)?;
    Ok(manifest)
}

fn truth_container(t: &GroundTruth) -> Container {
    let mut c = Container::default();
    c.push("s0", t.s0.clone());
    for (j, a) in t.alpha.iter().enumerate() {
        c.push(format!("alpha/{j}"), a.clone());
    }
    for (j, b) in t.beta.iter().enumerate() {
        c.push(format!("beta/{j}"), b.clone());
    }
    for (i, b) in t.b.iter().enumerate() {
        c.push(format!("b/{i}"), b.clone());
    }
    for (ij, s) in t.s.iter().enumerate() {
        c.push(format!("s/{ij}"), s.clone());
    }
    for (ij, a) in t.mixing.iter().enumerate() {
        c.push(format!("mixing/{ij}"), a.clone());
    }
    c.push("covariates", t.covariates.clone());
    let nv = t.s0.ncols();
    c.push("masks", DMatrix::from_fn(t.masks.len(), nv, |l, v| f64::from(u8::from(t.masks[l][v]))));
    c
}

fn cmd_simulate(ctx: &mut Ctx) -> Result<()> {
    ctx.cfg.check_known(&allowed(Scenario::CONFIG_KEYS, &[&["replicates", "modes"], FIT_KEYS].concat()))?;
    let mut scn = Scenario::from_config(&ctx.cfg)?;
    scn.seed = ctx.seed;
    let replicates = ctx.cfg.value_or("replicates", 0usize)?;
    if replicates == 0 {
        let (raw, truth) = generate(&scn)?;
        ctx.write("raw.lica", &encode_dataset(&raw)?)?;
        ctx.write("truth.lica", &truth_container(&truth).encode()?)?;
        return Ok(());
    }
    let design = ctx.cfg.get("design").unwrap_or("recovery_reduced").to_string();
    let modes: Vec<PatternMode> = match ctx.cfg.list("modes")? {
        Some(m) => m,
        None => vec![ctx.cfg.value_or("mode", PatternMode::Exact)?],
    };
    let base_fit = fit_config(&ctx.cfg)?;
    let mut rows = Vec::new();
    for r in 0..replicates {
        let mut s = scn.clone();
        s.seed = ctx.seed.wrapping_add(r as u64);
        for &mode in &modes {
            let run = run_recovery(&s, &FitConfig { mode, ..base_fit.clone() })?;
            log::info!(
                "replicate {r} ({mode}): population {:.3}, subject {:.3}, converged {}",
                run.metrics.population_corr,
                run.metrics.subject_corr,
                run.fit.converged
            );
            rows.push(MetricRecord::from_recovery(&design, &s, r, &run));
        }
    }
    ctx.write_csv("metrics.csv", |b| write_metrics_csv(b, &rows))
}

fn cmd_preprocess(ctx: &mut Ctx) -> Result<()> {
    ctx.cfg.check_known(&allowed(&["input", "q", "method", "covariates"], &[]))?;
    let input = ctx.input("input")?;
    let mut raw = load_dataset(&input)?;
    if ctx.cfg.get("covariates").is_some() {
        let path = ctx.input("covariates")?;
        let (ids, x) = read_covariates_csv(&path)?;
        if ids.len() != raw.n_subjects {
            return Err(LicaError::Argument(format!(
                "covariate file has {} subjects, data have {}",
                ids.len(),
                raw.n_subjects
            )));
        }
        raw.covariates = x;
    }
    let q: usize = ctx
        .cfg
        .value("q")?
        .ok_or_else(|| LicaError::Config("missing required key 'q'".into()))?;
    let method = ctx.cfg.value_or("method", ReduceMethod::Whiten)?;
    let (ds, bases) = reduce_dataset(&raw, q, method)?;
    let mut c = Container::default();
    for (ij, u) in bases.into_iter().enumerate() {
        c.push(format!("basis/{ij}"), u);
    }
    ctx.write("reduced.lica", &encode_dataset(&ds)?)?;
    ctx.write("bases.lica", &c.encode()?)
}

#[derive(Serialize)]
struct FitSummary {
    mode: String,
    converged: bool,
    iterations: usize,
    final_loglik: f64,
    q: usize,
    m: usize,
    n_subjects: usize,
    n_visits: usize,
    n_voxels: usize,
}

fn cmd_fit(ctx: &mut Ctx) -> Result<()> {
    ctx.cfg.check_known(&allowed(FIT_KEYS, &["data", "q"]))?;
    let data = ctx.input("data")?;
    let ds = load_dataset(&data)?;
    let mut fc = fit_config(&ctx.cfg)?;
    fc.q = ctx.cfg.value_or("q", 0usize)?;
    let res: FitResult = fit(&ds, &fc, ctx.seed)?;
    if !res.converged {
        log::warn!("fit did not converge in {} iterations", res.iterations);
    }
    ctx.write("fit.lica", &res.to_container().encode()?)?;
    let summary = FitSummary {
        mode: res.mode.to_string(),
        converged: res.converged,
        iterations: res.iterations,
        final_loglik: res.loglik_trace.last().copied().unwrap_or(f64::NAN),
        q: res.theta.q(),
        m: res.theta.mog.m(),
        n_subjects: ds.n_subjects,
        n_visits: ds.n_visits,
        n_voxels: ds.n_voxels(),
    };
    let bytes = serde_json::to_vec_pretty(&summary).map_err(|e| LicaError::Format(e.to_string()))?;
    ctx.write("fit_summary.json", &bytes)
}

/// Theta from a fit container and the posterior moments at it.
fn load_fit(ctx: &mut Ctx) -> Result<(LongitudinalDataset, ModelParams, PosteriorMoments)> {
    let data = ctx.input("data")?;
    let fit_path = ctx.input("fit")?;
    let ds = load_dataset(&data)?;
    let c = Container::load(&fit_path)?;
    let theta = theta_from_container(&c)?;
    let stored = if c.scalar("mode_subspace")? > 0.5 { PatternMode::Subspace } else { PatternMode::Exact };
    let mode = ctx.cfg.value_or("mode", stored)?;
    if theta.n_voxels() != ds.n_voxels() || theta.mixing.len() != ds.blocks.len() {
        return Err(LicaError::Argument("fit and data disagree on voxels or blocks".into()));
    }
    let patterns = enumerate_patterns(theta.q(), theta.mog.m(), mode, u64::MAX)?;
    let cache = PatternCache::build(&theta, &patterns)?;
    let (moments, _) = estep_all(&ds, &theta, &cache)?;
    Ok((ds, theta, moments))
}

fn cmd_infer(ctx: &mut Ctx) -> Result<()> {
    ctx.cfg.check_known(&allowed(&["data", "fit", "contrasts", "correction", "alpha", "sigma", "mode"], &[]))?;
    let cpath = ctx.input("contrasts")?;
    let contrasts = load_contrasts(&cpath)?;
    let opts = InferenceOptions {
        correction: ctx.cfg.value_or("correction", Correction::None)?,
        alpha: ctx.cfg.value_or("alpha", 0.05)?,
        sigma: match ctx.cfg.get("sigma").unwrap_or("posterior") {
            "posterior" => SigmaChoice::Posterior,
            "map" => SigmaChoice::Map,
            other => return Err(LicaError::Config(format!("unknown sigma '{other}' (posterior|map)"))),
        },
    };
    let (ds, theta, moments) = load_fit(ctx)?;
    let res = infer(&theta, &moments, &ds.covariates, &contrasts, opts)?;
    let coords = ds.voxel_coords.clone();
    ctx.write_csv("inference.csv", |b| write_inference_csv(b, &res, coords.as_deref()))
}

fn cmd_predict(ctx: &mut Ctx) -> Result<()> {
    ctx.cfg.check_known(&allowed(&["data", "fit", "visits", "x", "threshold", "trend_voxels", "mode"], &[]))?;
    let (ds, theta, moments) = load_fit(ctx)?;
    let x: Vec<f64> = ctx.cfg.list("x")?.unwrap_or_else(|| vec![0.0; theta.n_covariates()]);
    let visits: Vec<usize> = ctx.cfg.list("visits")?.unwrap_or_else(|| (0..theta.n_visits()).collect());
    let threshold: Option<f64> = ctx.cfg.value("threshold")?;
    let coords = ds.voxel_coords.clone();
    let mut maps = Vec::new();
    for &j in &visits {
        let mut m = predict_subpopulation(&theta, &moments, &x, j)?;
        if let Some(t) = threshold {
            m = m.thresholded(t);
        }
        ctx.write_csv(&format!("map_visit{j}.csv"), |b| write_map_csv(b, &m, coords.as_deref()))?;
        maps.push(m);
    }
    if let Some(vox) = ctx.cfg.list::<usize>("trend_voxels")? {
        let rows = extract_trends(&maps, &vox)?;
        ctx.write_csv("trends.csv", |b| write_trends_csv(b, &rows))?;
    }
    Ok(())
}

fn cmd_report(ctx: &mut Ctx) -> Result<()> {
    ctx.cfg.check_known(&allowed(&["results"], &[]))?;
    let dir = match ctx.cfg.get("results") {
        Some(_) => ctx.input("results")?,
        None => ctx.out.clone(),
    };
    let report = build_report(&dir)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    ctx.inputs.extend(report.files_read.iter().map(|p| p.display().to_string()));
    let written = write_report(&report, &ctx.out)?;
    ctx.outputs.extend(written.iter().map(|p| p.display().to_string()));
    Ok(())
}

fn cmd_calibrate(ctx: &mut Ctx) -> Result<()> {
    let extra = [&["runs", "alphas", "effects", "exact_every", "tested_ic"], FIT_KEYS].concat();
    ctx.cfg.check_known(&allowed(Scenario::CONFIG_KEYS, &extra))?;
    if ctx.cfg.get("design").is_none() {
        ctx.cfg.set("design", "calibration");
    }
    if ctx.cfg.get("mode").is_none() {
        ctx.cfg.set("mode", "subspace");
    }
    let scn = Scenario::from_config(&ctx.cfg)?;
    let d = CalibrationConfig::default();
    let cc = CalibrationConfig {
        runs_per_effect: ctx.cfg.value_or("runs", d.runs_per_effect)?,
        alphas: ctx.cfg.list("alphas")?.unwrap_or(d.alphas),
        effects: ctx.cfg.list("effects")?.unwrap_or(d.effects),
        base_seed: ctx.seed,
        fit: fit_config(&ctx.cfg)?,
        exact_every: ctx.cfg.value_or("exact_every", d.exact_every)?,
        tested_ic: ctx.cfg.value_or("tested_ic", d.tested_ic)?,
    };
    let table = run_test_calibration(&scn, &cc)?;
    ctx.write_csv("calibration.csv", |b| table.write_csv(b))
}
