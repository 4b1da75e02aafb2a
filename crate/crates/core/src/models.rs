//! Regressor sets for the panel and univariate quantile models, the
//! portfolio-level univariate model and the RiskMetrics EWMA recursion.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::market_data::DailyPanel;
use crate::qreg::{FitMode, QuantileProblem};
use crate::realized::{AssetMeasures, RealizedDay};

pub const RISKMETRICS_DECAY: f64 = 0.94;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    PqrRv,
    PqrRsv,
    PqrBpv,
    UqrRv,
    UqrRsv,
    UqrBpv,
    PortfolioUqr,
    RiskMetrics,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::PqrRv,
        ModelKind::PqrRsv,
        ModelKind::PqrBpv,
        ModelKind::UqrRv,
        ModelKind::UqrRsv,
        ModelKind::UqrBpv,
        ModelKind::PortfolioUqr,
        ModelKind::RiskMetrics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::PqrRv => "pqr-rv",
            ModelKind::PqrRsv => "pqr-rsv",
            ModelKind::PqrBpv => "pqr-bpv",
            ModelKind::UqrRv => "uqr-rv",
            ModelKind::UqrRsv => "uqr-rsv",
            ModelKind::UqrBpv => "uqr-bpv",
            ModelKind::PortfolioUqr => "portfolio-uqr",
            ModelKind::RiskMetrics => "riskmetrics",
        }
    }

    pub fn is_panel(self) -> bool {
        matches!(self, ModelKind::PqrRv | ModelKind::PqrRsv | ModelKind::PqrBpv)
    }

    pub fn is_univariate(self) -> bool {
        matches!(self, ModelKind::UqrRv | ModelKind::UqrRsv | ModelKind::UqrBpv)
    }

    /// Names of the per-lag regressors, `None` for RiskMetrics.
    fn measure_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::PqrRv | ModelKind::UqrRv => &["sqrt_rv"],
            ModelKind::PqrRsv | ModelKind::UqrRsv => &["sqrt_rs_plus", "sqrt_rs_minus"],
            ModelKind::PqrBpv | ModelKind::UqrBpv => &["sqrt_bpv", "sqrt_jv"],
            ModelKind::PortfolioUqr => &["sigma_p"],
            ModelKind::RiskMetrics => &[],
        }
    }

    fn measure_values(self, m: &AssetMeasures) -> Vec<f64> {
        let mut out = Vec::with_capacity(2);
        self.push_measure_values(m, &mut out);
        out
    }

    fn push_measure_values(self, m: &AssetMeasures, out: &mut Vec<f64>) {
        match self {
            ModelKind::PqrRv | ModelKind::UqrRv => out.push(m.rv.sqrt()),
            ModelKind::PqrRsv | ModelKind::UqrRsv => out.extend([m.rs_plus.sqrt(), m.rs_minus.sqrt()]),
            ModelKind::PqrBpv | ModelKind::UqrBpv => out.extend([m.bpv.sqrt(), m.jv.sqrt()]),
            ModelKind::PortfolioUqr | ModelKind::RiskMetrics => {}
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let norm = match norm.as_str() {
            "uqr" => "uqr-rv".to_string(),
            "portfolio uqr" | "portfoliouqr" | "puqr" => "portfolio-uqr".to_string(),
            _ => norm,
        };
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown model `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub lag_count: usize,
    pub taus: Vec<f64>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, lag_count: usize, taus: Vec<f64>) -> Result<Self> {
        if lag_count == 0 {
            return Err(Error::invalid("lag_count must be at least 1"));
        }
        if taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::invalid("quantile levels must lie in (0,1)"));
        }
        Ok(Self { kind, lag_count, taus })
    }

    pub fn slope_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for lag in 0..self.lag_count {
            for m in self.kind.measure_names() {
                names.push(if lag == 0 { format!("beta_{m}") } else { format!("beta_{m}_lag{lag}") });
            }
        }
        names
    }
}

/// Realized measures aligned day by day with the return panel.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub returns: DailyPanel,
    pub measures: Vec<RealizedDay>,
}

impl ModelData {
    pub fn new(returns: DailyPanel, measures: Vec<RealizedDay>) -> Result<Self> {
        if measures.len() != returns.n_days() {
            return Err(Error::Alignment(format!(
                "{} measure days vs {} return days",
                measures.len(),
                returns.n_days()
            )));
        }
        for (m, d) in measures.iter().zip(&returns.dates) {
            if m.date != *d {
                return Err(Error::Alignment(format!("measure date {} vs return date {d}", m.date)));
            }
            if m.assets.len() != returns.n_assets() {
                return Err(Error::Alignment(format!("{}: {} assets measured", m.date, m.assets.len())));
            }
        }
        Ok(Self { returns, measures })
    }

    pub fn n_days(&self) -> usize {
        self.returns.n_days()
    }

    pub fn n_assets(&self) -> usize {
        self.returns.n_assets()
    }

    /// Per-asset regressors observed at day `t`, lags stacked after the current day.
    pub fn regressors_at(&self, kind: ModelKind, lag_count: usize, t: usize, asset: usize) -> Vec<f64> {
        (0..lag_count).flat_map(|l| kind.measure_values(&self.measures[t - l].assets[asset])).collect()
    }
}

/// Panel (or univariate) problem from regression pairs `s ∈ pairs`:
/// response is the day `s + 1` return, regressors are measured on `s, s−1, …`.
pub fn build_design_range(
    spec: &ModelSpec,
    data: &ModelData,
    pairs: std::ops::Range<usize>,
    tau: f64,
    lambda: f64,
) -> Result<QuantileProblem> {
    let mode = if spec.kind.is_panel() {
        FitMode::Panel
    } else if spec.kind.is_univariate() {
        FitMode::Univariate
    } else {
        return Err(Error::invalid(format!("{} is not an asset-level quantile model", spec.kind)));
    };
    let lag0 = spec.lag_count - 1;
    if pairs.start < lag0 || pairs.end + 1 > data.n_days() || pairs.is_empty() {
        return Err(Error::Alignment(format!(
            "pairs {:?} need days {}..={} of {}",
            pairs,
            pairs.start.saturating_sub(lag0),
            pairs.end,
            data.n_days()
        )));
    }
    let n = data.n_assets();
    let rows = pairs.len() * n;
    let mut y = Vec::with_capacity(rows);
    let mut x = Vec::with_capacity(rows * spec.slope_names().len());
    let mut asset_index = Vec::with_capacity(rows);
    let mut time_index = Vec::with_capacity(rows);
    for a in 0..n {
        for s in pairs.clone() {
            y.push(data.returns.returns[(s + 1, a)]);
            for l in 0..spec.lag_count {
                spec.kind.push_measure_values(&data.measures[s - l].assets[a], &mut x);
            }
            asset_index.push(a);
            time_index.push(s);
        }
    }
    QuantileProblem::new(
        y,
        x,
        spec.slope_names(),
        asset_index,
        data.returns.assets.clone(),
        time_index,
        tau,
        lambda,
        mode,
    )
}

/// Full-sample design: every day with enough history and a next-day response.
pub fn build_design(spec: &ModelSpec, data: &ModelData, tau: f64, lambda: f64) -> Result<QuantileProblem> {
    let start = spec.lag_count - 1;
    let end = data.n_days().saturating_sub(1);
    if end <= start {
        return Err(Error::Alignment("not enough days for one regression pair".into()));
    }
    build_design_range(spec, data, start..end, tau, lambda)
}

/// Portfolio returns `w'r_t` and volatilities `√(w'Σ_t w)`.
pub fn portfolio_uqr_series(
    returns: &DailyPanel,
    covariances: &[DMatrix<f64>],
    weights: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_weights(weights, returns.n_assets())?;
    if covariances.len() != returns.n_days() {
        return Err(Error::Alignment(format!(
            "{} covariance matrices for {} days",
            covariances.len(),
            returns.n_days()
        )));
    }
    let w = DVector::from_column_slice(weights);
    let r_p = (0..returns.n_days()).map(|t| returns.returns.row(t).transpose().dot(&w)).collect();
    let sigma_p = covariances
        .iter()
        .map(|s| {
            let v = w.dot(&(s * &w));
            if v < -1e-12 {
                Err(Error::NumericalPsd(v))
            } else {
                Ok(v.max(0.0).sqrt())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((r_p, sigma_p))
}

pub(crate) fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::invalid(format!("{} weights for {n} assets", weights.len())));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("weights sum to {s}, not 1")));
    }
    Ok(())
}

/// Univariate problem on the portfolio series: response `r_P,s+1`, regressors `σ_P,s, σ_P,s−1, …`.
pub fn portfolio_design(
    r_p: &[f64],
    sigma_p: &[f64],
    lag_count: usize,
    pairs: std::ops::Range<usize>,
    tau: f64,
) -> Result<QuantileProblem> {
    if pairs.start + 1 < lag_count || pairs.end + 1 > r_p.len() || pairs.is_empty() {
        return Err(Error::Alignment(format!("pairs {pairs:?} out of range for {} days", r_p.len())));
    }
    let spec = ModelSpec::new(ModelKind::PortfolioUqr, lag_count, vec![])?;
    let y: Vec<f64> = pairs.clone().map(|s| r_p[s + 1]).collect();
    let x: Vec<f64> = pairs.clone().flat_map(|s| (0..lag_count).map(move |l| sigma_p[s - l])).collect();
    let m = y.len();
    QuantileProblem::new(
        y,
        x,
        spec.slope_names(),
        vec![0; m],
        vec!["portfolio".into()],
        pairs.collect(),
        tau,
        0.0,
        FitMode::Univariate,
    )
}

/// RiskMetrics conditional covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct EwmaState {
    pub sigma: DMatrix<f64>,
    pub decay: f64,
}

impl EwmaState {
    pub fn new(sigma: DMatrix<f64>, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::invalid(format!("decay must lie in (0,1), got {decay}")));
        }
        if !sigma.is_square() {
            return Err(Error::invalid("EWMA covariance must be square"));
        }
        Ok(Self { sigma, decay })
    }

    /// Seeded with the sample covariance of `window` (rows are days).
    pub fn from_sample(window: &DMatrix<f64>, decay: f64) -> Result<Self> {
        let t = window.nrows();
        if t < 2 {
            return Err(Error::invalid("need at least two days to seed the EWMA"));
        }
        let mean = window.row_mean();
        let centered = DMatrix::from_fn(t, window.ncols(), |i, j| window[(i, j)] - mean[j]);
        let sigma = centered.transpose() * &centered / (t - 1) as f64;
        Self::new(sigma, decay)
    }

    pub fn update(&self, r: &[f64]) -> Result<Self> {
        riskmetrics_update(self, r)
    }
}

/// `σ ← λσ + (1 − λ) r r'`
pub fn riskmetrics_update(state: &EwmaState, r: &[f64]) -> Result<EwmaState> {
    let n = state.sigma.nrows();
    if r.len() != n {
        return Err(Error::invalid(format!("{} returns for a {n}-asset EWMA", r.len())));
    }
    let lam = state.decay;
    let sigma = DMatrix::from_fn(n, n, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        lam * state.sigma[(a, b)] + (1.0 - lam) * r[a] * r[b]
    });
    Ok(EwmaState { sigma, decay: lam })
}
