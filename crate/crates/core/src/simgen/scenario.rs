//! Simulation scenarios.

use crate::config::Config;
use crate::error::{LicaError, Result};

/// Axis-aligned ellipsoid on the voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Region {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        let mut r = 0.0;
        for a in 0..3 {
            let d = (p[a] as f64 - self.center[a]) / self.radii[a];
            r += d * d;
        }
        r <= 1.0
    }

    /// Largest in-plane diameter, used to scale the beta field.
    pub fn diameter(&self) -> f64 {
        2.0 * self.radii[0].max(self.radii[1])
    }
}

/// Band-limited synthetic time courses.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeCourseSpec {
    pub length: usize,
    pub tr: f64,
    pub band: (f64, f64),
    pub n_sinusoids: usize,
    pub ar_rho: f64,
    pub ar_sd: f64,
}

impl Default for TimeCourseSpec {
    fn default() -> Self {
        Self { length: 200, tr: 2.0, band: (0.01, 0.1), n_sinusoids: 3, ar_rho: 0.3, ar_sd: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n_subjects: usize,
    pub n_visits: usize,
    pub q: usize,
    pub grid: [usize; 3],
    /// MoG component count used when fitting.
    pub m: usize,
    pub regions: Vec<Region>,
    pub activation_mean: f64,
    pub activation_sd: f64,
    pub background_sd: f64,
    /// Visit effect inside active regions, one per visit (first is 0).
    pub alpha: Vec<f64>,
    /// Mean covariate effect inside active regions, one per visit.
    pub beta_mean: Vec<f64>,
    /// Marginal SD of the squared-exponential field around `beta_mean`.
    pub beta_sd: f64,
    /// Length-scale as a fraction of the region diameter.
    pub beta_length_frac: f64,
    /// Restrict the covariate effect to these ICs (empty = all).
    pub beta_ics: Vec<usize>,
    pub d: Vec<f64>,
    pub tau_sq: f64,
    pub sigma0_sq: f64,
    /// Bernoulli success probability of the single binary covariate; None
    /// for no covariates.
    pub covariate_prob: Option<f64>,
    pub time_courses: TimeCourseSpec,
    pub seed: u64,
}

/// Ellipsoids spread on a circle around the grid centre, spanning all slices.
pub fn default_regions(grid: [usize; 3], q: usize) -> Vec<Region> {
    let cx = (grid[0] as f64 - 1.0) / 2.0;
    let cy = (grid[1] as f64 - 1.0) / 2.0;
    let cz = (grid[2] as f64 - 1.0) / 2.0;
    let span = grid[0].min(grid[1]) as f64;
    let ring = if q == 1 { 0.0 } else { 0.25 * span };
    let mut radius = if q <= 3 { 0.2 * span } else { 0.2 * span * (3.0 / q as f64).sqrt() };
    if q > 1 {
        // keep neighbouring regions on the ring apart
        let chord = 2.0 * ring * (std::f64::consts::PI / q as f64).sin();
        radius = radius.min(0.48 * chord);
    }
    (0..q)
        .map(|l| {
            let t = 2.0 * std::f64::consts::PI * l as f64 / q as f64 + 0.3;
            Region {
                center: [cx + ring * t.cos(), cy + ring * t.sin(), cz],
                radii: [radius, radius, (grid[2] as f64 / 2.0).max(0.5)],
            }
        })
        .collect()
}

impl Scenario {
    /// Longitudinal recovery design: three ICs on a 53 x 63 x 3 grid,
    /// three visits, alpha = (0, 2, 3) in active regions.
    pub fn recovery(n_subjects: usize, tau_sq: f64) -> Self {
        let grid = [53, 63, 3];
        Self {
            n_subjects,
            n_visits: 3,
            q: 3,
            grid,
            m: 2,
            regions: default_regions(grid, 3),
            activation_mean: 4.0,
            activation_sd: 1.0,
            background_sd: 0.1,
            alpha: vec![0.0, 2.0, 3.0],
            beta_mean: vec![0.0, 0.5, 1.0],
            beta_sd: 0.5,
            beta_length_frac: 0.25,
            beta_ics: Vec::new(),
            d: vec![1.0, 1.1 * 1.1, 1.2 * 1.2],
            tau_sq,
            sigma0_sq: 1.0,
            covariate_prob: Some(0.5),
            time_courses: TimeCourseSpec::default(),
            seed: 0,
        }
    }

    /// Recovery design on a smaller grid (26 x 26 x 3 = 2028 voxels).
    pub fn recovery_reduced(n_subjects: usize, tau_sq: f64) -> Self {
        let mut s = Self::recovery(n_subjects, tau_sq);
        s.set_grid([26, 26, 3]);
        s
    }

    /// Covariate-test design: two ICs on a 20 x 20 image, two visits,
    /// N = 40, no baseline covariate effect and `effect` at the second
    /// visit inside the first IC's region.
    pub fn calibration(effect: f64) -> Self {
        let grid = [20, 20, 1];
        Self {
            n_subjects: 40,
            n_visits: 2,
            q: 2,
            grid,
            m: 2,
            regions: default_regions(grid, 2),
            activation_mean: 4.0,
            activation_sd: 1.0,
            background_sd: 0.1,
            alpha: vec![0.0, 1.0],
            beta_mean: vec![0.0, effect],
            beta_sd: 0.0,
            beta_length_frac: 0.25,
            beta_ics: vec![0],
            d: vec![1.0, 1.1 * 1.1],
            tau_sq: 0.5,
            sigma0_sq: 1.0,
            covariate_prob: Some(0.5),
            time_courses: TimeCourseSpec { length: 40, ..TimeCourseSpec::default() },
            seed: 0,
        }
    }

    /// Subspace-versus-exact design with ten subjects.
    pub fn timing(q: usize) -> Self {
        let grid = [20, 20, 2];
        let mut d = Vec::new();
        for l in 0..q {
            let sd = 1.0 + 0.1 * (l % 3) as f64;
            d.push(sd * sd);
        }
        Self {
            n_subjects: 10,
            n_visits: 2,
            q,
            grid,
            m: 2,
            regions: default_regions(grid, q),
            activation_mean: 4.0,
            activation_sd: 1.0,
            background_sd: 0.1,
            alpha: vec![0.0, 2.0],
            beta_mean: vec![0.0, 0.5],
            beta_sd: 0.5,
            beta_length_frac: 0.25,
            beta_ics: Vec::new(),
            d,
            tau_sq: 0.5,
            sigma0_sq: 1.0,
            covariate_prob: Some(0.5),
            time_courses: TimeCourseSpec { length: 60, ..TimeCourseSpec::default() },
            seed: 0,
        }
    }

    pub fn set_grid(&mut self, grid: [usize; 3]) {
        self.grid = grid;
        self.regions = default_regions(grid, self.q);
    }

    pub fn n_voxels(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn n_covariates(&self) -> usize {
        usize::from(self.covariate_prob.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let arg = |m: String| Err(LicaError::Argument(m));
        if self.n_subjects == 0 || self.n_visits == 0 || self.q == 0 || self.n_voxels() == 0 {
            return arg("scenario needs positive N, K, q and grid dimensions".into());
        }
        if self.regions.len() != self.q {
            return arg(format!("{} regions for q = {}", self.regions.len(), self.q));
        }
        for (l, r) in self.regions.iter().enumerate() {
            for a in 0..3 {
                let lo = r.center[a] - r.radii[a];
                let hi = r.center[a] + r.radii[a];
                if !(r.radii[a] > 0.0) || lo < -0.5 || hi > self.grid[a] as f64 - 0.5 {
                    return arg(format!("region {l} extends beyond the {:?} grid along axis {a}", self.grid));
                }
            }
        }
        if self.alpha.len() != self.n_visits || self.beta_mean.len() != self.n_visits {
            return arg(format!("alpha and beta_mean need {} entries", self.n_visits));
        }
        if self.alpha[0] != 0.0 {
            return arg("alpha at baseline must be 0".into());
        }
        if self.d.len() != self.q {
            return arg(format!("D needs {} entries", self.q));
        }
        let vars = [self.tau_sq, self.sigma0_sq, self.activation_sd, self.background_sd, self.beta_sd];
        if vars.iter().chain(&self.d).any(|x| !(x.is_finite() && *x >= 0.0)) {
            return arg("variances and standard deviations must be finite and non-negative".into());
        }
        if let Some(p) = self.covariate_prob {
            if !(0.0..=1.0).contains(&p) {
                return arg(format!("covariate probability {p} outside [0, 1]"));
            }
        }
        if self.beta_ics.iter().any(|&l| l >= self.q) {
            return arg("beta_ics refers to a missing IC".into());
        }
        let tc = &self.time_courses;
        if tc.length < self.q || !(tc.tr > 0.0) || !(tc.band.0 > 0.0 && tc.band.0 < tc.band.1) {
            return arg("time-course length must be at least q, with a positive TR and an increasing band".into());
        }
        Ok(())
    }

    pub const CONFIG_KEYS: &'static [&'static str] = &[
        "design", "n_subjects", "n_visits", "q", "grid", "m", "region.*", "activation_mean", "activation_sd",
        "background_sd", "alpha", "beta_mean", "beta_sd", "beta_length_frac", "beta_ics", "d", "tau_sq",
        "sigma0_sq", "covariate_prob", "tc_length", "tc_tr", "tc_band", "tc_sinusoids", "tc_ar_rho", "tc_ar_sd",
        "seed", "effect",
    ];

    /// Builds a scenario from a config: `design` (recovery | recovery_reduced
    /// | calibration | timing) picks the defaults, other keys override them.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let design = cfg.get("design").unwrap_or("recovery_reduced");
        let n = cfg.value_or("n_subjects", 20usize)?;
        let tau = cfg.value_or("tau_sq", 0.5)?;
        let mut s = match design {
            "recovery" => Self::recovery(n, tau),
            "recovery_reduced" => Self::recovery_reduced(n, tau),
            "calibration" => Self::calibration(cfg.value_or("effect", 0.0)?),
            "timing" => Self::timing(cfg.value_or("q", 3usize)?),
            other => return Err(LicaError::Config(format!("unknown design '{other}'"))),
        };
        s.n_subjects = cfg.value_or("n_subjects", s.n_subjects)?;
        s.tau_sq = cfg.value_or("tau_sq", s.tau_sq)?;
        s.n_visits = cfg.value_or("n_visits", s.n_visits)?;
        if let Some(q) = cfg.value::<usize>("q")? {
            if q != s.q {
                s.q = q;
                s.regions = default_regions(s.grid, q);
                s.d.resize(q, *s.d.last().unwrap_or(&1.0));
            }
        }
        if let Some(g) = cfg.list::<usize>("grid")? {
            let g: [usize; 3] = g
                .try_into()
                .map_err(|_| LicaError::Config("grid needs three dimensions".into()))?;
            s.set_grid(g);
        }
        s.m = cfg.value_or("m", s.m)?;
        for l in 0..s.q {
            if let Some(r) = cfg.list::<f64>(&format!("region.{l}"))? {
                if r.len() != 6 {
                    return Err(LicaError::Config(format!("region.{l} needs cx,cy,cz,rx,ry,rz")));
                }
                s.regions[l] = Region { center: [r[0], r[1], r[2]], radii: [r[3], r[4], r[5]] };
            }
        }
        s.activation_mean = cfg.value_or("activation_mean", s.activation_mean)?;
        s.activation_sd = cfg.value_or("activation_sd", s.activation_sd)?;
        s.background_sd = cfg.value_or("background_sd", s.background_sd)?;
        if let Some(a) = cfg.list("alpha")? {
            s.alpha = a;
        }
        if let Some(b) = cfg.list("beta_mean")? {
            s.beta_mean = b;
        }
        s.beta_sd = cfg.value_or("beta_sd", s.beta_sd)?;
        s.beta_length_frac = cfg.value_or("beta_length_frac", s.beta_length_frac)?;
        if let Some(b) = cfg.list("beta_ics")? {
            s.beta_ics = b;
        }
        if let Some(d) = cfg.list("d")? {
            s.d = d;
        }
        s.sigma0_sq = cfg.value_or("sigma0_sq", s.sigma0_sq)?;
        match cfg.get("covariate_prob") {
            Some("none") => s.covariate_prob = None,
            _ => {
                if let Some(p) = cfg.value("covariate_prob")? {
                    s.covariate_prob = Some(p);
                }
            }
        }
        let tc = &mut s.time_courses;
        tc.length = cfg.value_or("tc_length", tc.length)?;
        tc.tr = cfg.value_or("tc_tr", tc.tr)?;
        if let Some(b) = cfg.list::<f64>("tc_band")? {
            if b.len() != 2 {
                return Err(LicaError::Config("tc_band needs two frequencies".into()));
            }
            tc.band = (b[0], b[1]);
        }
        tc.n_sinusoids = cfg.value_or("tc_sinusoids", tc.n_sinusoids)?;
        tc.ar_rho = cfg.value_or("tc_ar_rho", tc.ar_rho)?;
        tc.ar_sd = cfg.value_or("tc_ar_sd", tc.ar_sd)?;
        s.seed = cfg.value_or("seed", s.seed)?;
        s.validate()?;
        Ok(s)
    }
}
