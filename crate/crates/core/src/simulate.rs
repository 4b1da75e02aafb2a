//! Monte-Carlo generator: log-prices following a jump diffusion whose
//! variance is a square-root (Heston) process, discretized by Euler with
//! full truncation on a one-minute grid.
//!
//! Model time is measured in years with `days_per_year` trading days, so
//! `α = 0.04` is an annual variance and a typical day carries `α / 252`.

use std::io::Write;

use chrono::{Datelike, NaiveDate, NaiveTime, Weekday};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Normal, Poisson, StandardNormal, StudentT};

use crate::error::{Error, Result};
use crate::market_data::{IntradayPanel, Session};
use crate::rng::stream;

pub const T_DOF: f64 = 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorDist {
    /// Correlated normal innovations with the day's Σ.
    Mvn,
    /// Multivariate Student-t(9) with the day's Σ as scale matrix.
    Mt9,
    /// Independent standard normals.
    Normal,
    /// Independent Student-t(9).
    T9,
}

impl ErrorDist {
    pub fn name(self) -> &'static str {
        match self {
            ErrorDist::Mvn => "mvn",
            ErrorDist::Mt9 => "mt9",
            ErrorDist::Normal => "normal",
            ErrorDist::T9 => "t9",
        }
    }

    pub fn is_multivariate(self) -> bool {
        matches!(self, ErrorDist::Mvn | ErrorDist::Mt9)
    }

    fn t_factor(self) -> f64 {
        match self {
            ErrorDist::Mt9 | ErrorDist::T9 => T_DOF / (T_DOF - 2.0),
            _ => 1.0,
        }
    }
}

impl std::fmt::Display for ErrorDist {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ErrorDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mvn" => Ok(ErrorDist::Mvn),
            "mt9" | "mt" => Ok(ErrorDist::Mt9),
            "normal" | "n" | "n01" => Ok(ErrorDist::Normal),
            "t9" | "t" => Ok(ErrorDist::T9),
            other => Err(Error::invalid(format!("unknown error distribution '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub mu: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub sigma_j: f64,
    /// Expected jumps per asset per day.
    pub jump_intensity: f64,
    pub days: usize,
    pub intraday_steps: usize,
    pub n_assets: usize,
    pub error_dist: ErrorDist,
    pub days_per_year: f64,
    /// Starting variance of every asset; `α` by default.
    pub initial_variance: f64,
    pub seed: u64,
    /// Replication index selecting an independent RNG stream.
    pub replication: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mu: 0.0,
            alpha: 0.04,
            kappa: 5.0,
            gamma: 0.5,
            sigma_j: 0.01,
            jump_intensity: 0.05,
            days: 2613,
            intraday_steps: 420,
            n_assets: 5,
            error_dist: ErrorDist::Mvn,
            days_per_year: 252.0,
            initial_variance: 0.04,
            seed: 0,
            replication: 0,
        }
    }
}

const SESSION_SECONDS: u32 = 7 * 3600;

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if 2.0 * self.kappa * self.alpha < self.gamma * self.gamma {
            return Err(Error::invalid(format!(
                "Feller condition violated: 2κα = {} < γ² = {}",
                2.0 * self.kappa * self.alpha,
                self.gamma * self.gamma
            )));
        }
        if self.alpha <= 0.0 || self.kappa <= 0.0 || self.gamma < 0.0 || self.initial_variance < 0.0 {
            return Err(Error::invalid("α, κ must be positive and γ, σ₀² non-negative"));
        }
        if self.sigma_j < 0.0 || self.jump_intensity < 0.0 || !self.jump_intensity.is_finite() {
            return Err(Error::invalid("jump size and intensity must be non-negative"));
        }
        if self.days == 0 || self.n_assets == 0 || self.days_per_year <= 0.0 {
            return Err(Error::invalid("days, assets and days_per_year must be positive"));
        }
        if self.intraday_steps == 0 || SESSION_SECONDS as usize % self.intraday_steps != 0 {
            return Err(Error::invalid(format!(
                "intraday_steps must divide the {SESSION_SECONDS}s session, got {}",
                self.intraday_steps
            )));
        }
        Ok(())
    }

    pub fn session(&self) -> Session {
        Session::new(NaiveTime::from_hms_opt(9, 30, 0).unwrap(), NaiveTime::from_hms_opt(16, 30, 0).unwrap())
            .expect("valid session")
    }

    pub fn grid_seconds(&self) -> u32 {
        SESSION_SECONDS / self.intraday_steps as u32
    }

    /// Step length in model time units (years).
    pub fn dt(&self) -> f64 {
        1.0 / (self.days_per_year * self.intraday_steps as f64)
    }

    fn path_rng(&self) -> ChaCha8Rng {
        stream(self.seed, 2 * self.replication)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jump {
    pub step: usize,
    pub size: f64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub panel: IntradayPanel,
    /// `[day][asset]` integrated variance of the continuous part.
    pub true_iv: Vec<Vec<f64>>,
    /// `[day][asset]` injected jumps.
    pub jumps: Vec<Vec<Vec<Jump>>>,
    /// `[day][asset]` sum of squared diffusion increments.
    pub continuous_qv: Vec<Vec<f64>>,
}

impl SimOutput {
    /// Sum of squared jump sizes per day and asset.
    pub fn true_jv(&self, day: usize, asset: usize) -> f64 {
        self.jumps[day][asset].iter().map(|j| j.size * j.size).sum()
    }

    /// `date,asset,true_iv,true_jv`
    pub fn write_ledger_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "date,asset,true_iv,true_jv")?;
        for (d, date) in self.panel.days().iter().enumerate() {
            for (a, name) in self.panel.assets().iter().enumerate() {
                writeln!(w, "{date},{name},{},{}", self.true_iv[d][a], self.true_jv(d, a))?;
            }
        }
        Ok(())
    }
}

/// `days` consecutive weekdays starting at 2000-01-03.
pub fn business_days(days: usize) -> Vec<NaiveDate> {
    let mut d = NaiveDate::from_ymd_opt(2000, 1, 3).unwrap();
    let mut out = Vec::with_capacity(days);
    while out.len() < days {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().unwrap();
    }
    out
}

pub fn asset_names(n: usize) -> Vec<String> {
    let width = n.to_string().len().max(2);
    (1..=n).map(|i| format!("A{i:0width$}")).collect()
}

/// Lower Cholesky factor; fails on matrices that are not positive definite
/// after a relative jitter of `1e-12`.
fn cholesky(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !sigma.is_square() {
        return Err(Error::Cholesky);
    }
    if let Some(c) = sigma.clone().cholesky() {
        return Ok(c.l());
    }
    let jitter = 1e-12 * sigma.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut s = sigma.clone();
    for i in 0..s.nrows() {
        s[(i, i)] += jitter;
    }
    s.cholesky().map(|c| c.l()).ok_or(Error::Cholesky)
}

struct Sampler {
    dist: ErrorDist,
    chol: Option<DMatrix<f64>>,
    t: StudentT<f64>,
    chi: ChiSquared<f64>,
    z: DVector<f64>,
}

impl Sampler {
    fn new(dist: ErrorDist, n: usize) -> Self {
        Self {
            dist,
            chol: None,
            t: StudentT::new(T_DOF).expect("valid dof"),
            chi: ChiSquared::new(T_DOF).expect("valid dof"),
            z: DVector::zeros(n),
        }
    }

    fn set_sigma(&mut self, sigma: Option<&DMatrix<f64>>) -> Result<()> {
        if self.dist.is_multivariate() {
            let s = sigma.ok_or_else(|| Error::invalid("multivariate errors need a covariance"))?;
            if s.nrows() != self.z.len() {
                return Err(Error::invalid(format!("{}x{} Σ for {} assets", s.nrows(), s.ncols(), self.z.len())));
            }
            self.chol = Some(cholesky(s)?);
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R, out: &mut [f64]) {
        match self.dist {
            ErrorDist::Normal => out.iter_mut().for_each(|x| *x = rng.sample(StandardNormal)),
            ErrorDist::T9 => out.iter_mut().for_each(|x| *x = self.t.sample(rng)),
            ErrorDist::Mvn | ErrorDist::Mt9 => {
                for v in self.z.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let scale = if self.dist == ErrorDist::Mt9 { (T_DOF / self.chi.sample(rng)).sqrt() } else { 1.0 };
                let l = self.chol.as_ref().expect("Σ set before drawing");
                for (i, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for j in 0..=i {
                        s += l[(i, j)] * self.z[j];
                    }
                    *o = scale * s;
                }
            }
        }
    }
}

/// `steps × n` innovations. Univariate modes ignore `sigma` except for its
/// dimension.
pub fn multivariate_innovations(dist: ErrorDist, sigma: &DMatrix<f64>, steps: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = sigma.nrows();
    let mut sampler = Sampler::new(dist, n);
    sampler.set_sigma(Some(sigma))?;
    let mut rng = stream(seed, 0);
    let mut out = DMatrix::zeros(steps, n);
    let mut row = vec![0.0; n];
    for k in 0..steps {
        sampler.draw(&mut rng, &mut row);
        for (j, v) in row.iter().enumerate() {
            out[(k, j)] = *v;
        }
    }
    Ok(out)
}

/// Degrees of freedom of the daily Wishart innovation of the synthetic Σ path.
pub const SIGMA_PATH_DOF: usize = 3;
/// Weight of the previous day's matrix in the synthetic Σ path.
pub const SIGMA_PATH_PERSISTENCE: f64 = 0.7;

/// Synthetic daily Σ path: a one-factor base correlation with per-asset
/// scale multipliers, perturbed by Wishart draws with mean equal to the
/// base matrix and mixed autoregressively,
/// `Σ_d = φ Σ_{d−1} + (1 − φ) W_d / ν`, so the path is persistent, stays
/// positive definite and keeps the base matrix as its mean.
pub fn synthetic_sigma_path(n_assets: usize, days: usize, seed: u64, stream_index: u64) -> Vec<DMatrix<f64>> {
    let mut rng = stream(seed, stream_index);
    let loadings: Vec<f64> = (0..n_assets).map(|_| rng.random_range(0.3..0.8)).collect();
    let scales: Vec<f64> = (0..n_assets).map(|_| rng.random_range(0.8..1.25)).collect();
    let base = DMatrix::from_fn(n_assets, n_assets, |i, j| {
        let rho = if i == j { 1.0 } else { loadings[i] * loadings[j] };
        scales[i] * rho * scales[j]
    });
    let l = base.clone().cholesky().expect("one-factor correlation is positive definite").l();
    let mut prev = base.clone();
    (0..days)
        .map(|_| {
            let mut w = DMatrix::zeros(n_assets, n_assets);
            for _ in 0..SIGMA_PATH_DOF {
                let z = DVector::from_fn(n_assets, |_, _| rng.sample::<f64, _>(StandardNormal));
                let x = &l * z;
                w += &x * x.transpose();
            }
            prev = &prev * SIGMA_PATH_PERSISTENCE + w * ((1.0 - SIGMA_PATH_PERSISTENCE) / SIGMA_PATH_DOF as f64);
            prev.clone()
        })
        .collect()
}

/// Simulates `config.days` days of log-prices for `config.n_assets` assets.
/// Each asset carries its own variance path. Multivariate error modes need
/// one covariance per day; when `sigma_series` is `None` a synthetic path
/// is generated from the configuration's seed.
pub fn simulate_paths(config: &SimConfig, sigma_series: Option<&[DMatrix<f64>]>) -> Result<SimOutput> {
    config.validate()?;
    let n = config.n_assets;
    let steps = config.intraday_steps;
    let dt = config.dt();
    let sqrt_dt = dt.sqrt();

    let generated;
    let sigmas: Option<&[DMatrix<f64>]> = if config.error_dist.is_multivariate() {
        match sigma_series {
            Some(s) => {
                if s.len() != config.days {
                    return Err(Error::invalid(format!("{} covariances for {} days", s.len(), config.days)));
                }
                Some(s)
            }
            None => {
                generated = synthetic_sigma_path(n, config.days, config.seed, 2 * config.replication + 1);
                Some(&generated)
            }
        }
    } else {
        None
    };

    let mut rng = config.path_rng();
    let mut sampler = Sampler::new(config.error_dist, n);
    let jump_size = Normal::new(0.0, config.sigma_j).map_err(|e| Error::invalid(e.to_string()))?;
    let jump_count = (config.jump_intensity > 0.0)
        .then(|| Poisson::new(config.jump_intensity))
        .transpose()
        .map_err(|e| Error::invalid(e.to_string()))?;

    let mut v = vec![config.initial_variance; n];
    let mut p = vec![0.0; n];
    let mut eps = vec![0.0; n];
    let mut log_prices = Vec::with_capacity(config.days);
    let mut true_iv = Vec::with_capacity(config.days);
    let mut jumps_all = Vec::with_capacity(config.days);
    let mut continuous_qv = Vec::with_capacity(config.days);
    let t_factor = config.error_dist.t_factor();

    for d in 0..config.days {
        let sigma_d = sigmas.map(|s| &s[d]);
        sampler.set_sigma(sigma_d)?;
        let var_eps: Vec<f64> = match sigma_d {
            Some(s) => (0..n).map(|i| s[(i, i)] * t_factor).collect(),
            None => vec![t_factor; n],
        };

        let mut day_jumps: Vec<Vec<Jump>> = vec![Vec::new(); n];
        if let Some(pois) = &jump_count {
            for slot in day_jumps.iter_mut() {
                let count = pois.sample(&mut rng) as usize;
                for _ in 0..count {
                    slot.push(Jump { step: rng.random_range(0..steps), size: jump_size.sample(&mut rng) });
                }
                slot.sort_by_key(|j| j.step);
            }
        }

        let mut paths: Vec<Vec<f64>> = (0..n)
            .map(|a| {
                let mut path = Vec::with_capacity(steps + 1);
                path.push(p[a]);
                path
            })
            .collect();
        let mut iv = vec![0.0; n];
        let mut cqv = vec![0.0; n];
        for k in 0..steps {
            sampler.draw(&mut rng, &mut eps);
            for a in 0..n {
                let vp = v[a].max(0.0);
                let diffusion = vp.sqrt() * sqrt_dt * eps[a];
                let drift = (config.mu - 0.5 * vp * var_eps[a]) * dt;
                iv[a] += vp * var_eps[a] * dt;
                cqv[a] += diffusion * diffusion;
                let mut dp = drift + diffusion;
                for j in day_jumps[a].iter().filter(|j| j.step == k) {
                    dp += j.size;
                }
                p[a] += dp;
                paths[a].push(p[a]);
                let z2: f64 = rng.sample(StandardNormal);
                v[a] += config.kappa * (config.alpha - vp) * dt + config.gamma * vp.sqrt() * sqrt_dt * z2;
            }
        }
        log_prices.push(paths);
        true_iv.push(iv);
        jumps_all.push(day_jumps);
        continuous_qv.push(cqv);
    }

    let panel = IntradayPanel::new(
        asset_names(n),
        business_days(config.days),
        config.grid_seconds(),
        config.session(),
        log_prices,
    )?;
    Ok(SimOutput { panel, true_iv, jumps: jumps_all, continuous_qv })
}
