//! Portfolio %VaR from per-asset quantile forecasts or EWMA covariances, and
//! the rolling-window out-of-sample forecasting harness.
//!
//! Quantile forecasts keep their natural sign: left-tail VaRs are negative.

use std::io::{Read, Write};

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::models::{
    build_design_range, check_weights, portfolio_design, portfolio_uqr_series, EwmaState, ModelData, ModelKind,
    ModelSpec, RISKMETRICS_DECAY,
};
use crate::qreg::{fit, fit_warm, QuantileFit, QuantileProblem};
use crate::realized::correlation_from_covariance;

pub fn standard_normal_quantile(tau: f64) -> f64 {
    Normal::standard().inverse_cdf(tau)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalVar {
    pub value: f64,
    /// `τ = 0.5`: the normal cut-off is zero and so is the VaR.
    pub degenerate_cutoff: bool,
}

/// `sign(γ_τ) √(γ_τ² w'Σw)`
pub fn normal_var(sigma: &DMatrix<f64>, weights: &[f64], tau: f64) -> Result<NormalVar> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0,1), got {tau}")));
    }
    check_weights(weights, sigma.nrows())?;
    let w = DVector::from_column_slice(weights);
    let var_p = w.dot(&(sigma * &w));
    if var_p < -1e-12 {
        return Err(Error::NumericalPsd(var_p));
    }
    if tau == 0.5 {
        return Ok(NormalVar { value: 0.0, degenerate_cutoff: true });
    }
    let gamma = standard_normal_quantile(tau);
    Ok(NormalVar { value: gamma.signum() * (gamma * gamma * var_p.max(0.0)).sqrt(), degenerate_cutoff: false })
}

/// Correlation-aggregated portfolio VaR,
/// `±√((w⊙v)' Ω (w⊙v))`, signed like `Σ wᵢvᵢ`.
pub fn aggregate_var(asset_vars: &[f64], omega: &DMatrix<f64>, weights: &[f64]) -> Result<f64> {
    let n = asset_vars.len();
    if omega.nrows() != n || omega.ncols() != n || weights.len() != n {
        return Err(Error::invalid("dimension mismatch in VaR aggregation"));
    }
    let min_eig = if n > 1 {
        SymmetricEigen::new(omega.clone()).eigenvalues.min()
    } else {
        omega[(0, 0)]
    };
    if min_eig < -1e-8 {
        return Err(Error::Correlation(min_eig));
    }
    let wv = DVector::from_iterator(n, weights.iter().zip(asset_vars).map(|(w, v)| w * v));
    let q = wv.dot(&(omega * &wv)).max(0.0);
    let sign = if wv.sum() < 0.0 { -1.0 } else { 1.0 };
    Ok(sign * q.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForecastFlag {
    DegenerateCutoff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRecord {
    /// Index of the forecast (target) day in the data.
    pub day: usize,
    pub date: NaiveDate,
    pub var_forecast: f64,
    pub realized_return: f64,
    pub asset_vars: Option<Vec<f64>>,
    pub flag: Option<ForecastFlag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaRForecastSeries {
    pub model: ModelKind,
    pub tau: f64,
    pub records: Vec<ForecastRecord>,
}

impl VaRForecastSeries {
    pub fn forecasts(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.var_forecast).collect()
    }

    pub fn realized(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.realized_return).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RollingConfig {
    /// Regression pairs per estimation window.
    pub window: usize,
    pub lambda: f64,
    pub weights: Vec<f64>,
}

impl RollingConfig {
    pub fn equal_weights(window: usize, lambda: f64, n_assets: usize) -> Self {
        Self { window, lambda, weights: vec![1.0 / n_assets as f64; n_assets] }
    }
}

/// Window end days `t` (forecasting day `t + 1`), i.e. `window..T−1`.
pub fn forecast_days(n_days: usize, window: usize) -> std::ops::Range<usize> {
    window..n_days.saturating_sub(1).max(window)
}

/// One-step-ahead portfolio VaR for every window end and every `τ` in `spec.taus`.
///
/// The window ending on day `t` uses the regression pairs `t−window..t`
/// (regressors on day `s`, response on day `s + 1`), so only data dated
/// `≤ t` enters the forecast for `t + 1`. Parameters are re-estimated daily;
/// each fit is warm-started from the previous window's solution, which
/// changes the work done but not the optimum reached.
pub fn rolling_forecast(spec: &ModelSpec, data: &ModelData, cfg: &RollingConfig) -> Result<Vec<VaRForecastSeries>> {
    let n_days = data.n_days();
    if cfg.window < spec.lag_count || n_days <= cfg.window + 1 {
        return Err(Error::invalid(format!("need more than window + 1 = {} days, got {n_days}", cfg.window + 1)));
    }
    check_weights(&cfg.weights, data.n_assets())?;
    let days: Vec<usize> = forecast_days(n_days, cfg.window).collect();

    let per_tau: Vec<Vec<ForecastRecord>> = match spec.kind {
        ModelKind::RiskMetrics => riskmetrics_series(spec, data, cfg, &days)?,
        ModelKind::PortfolioUqr => {
            let covs: Vec<DMatrix<f64>> = data.measures.iter().map(|m| m.cov.clone()).collect();
            let (r_p, sigma_p) = portfolio_uqr_series(&data.returns, &covs, &cfg.weights)?;
            spec.taus
                .par_iter()
                .map(|&tau| portfolio_series(spec, data, &r_p, &sigma_p, cfg, &days, tau))
                .collect::<Result<Vec<_>>>()?
        }
        _ => {
            let omegas = days
                .iter()
                .map(|&t| correlation_from_covariance(&data.measures[t].cov).map_err(|e| annotate(e, data.returns.dates[t])))
                .collect::<Result<Vec<_>>>()?;
            spec.taus
                .par_iter()
                .map(|&tau| asset_series(spec, data, cfg, &days, &omegas, tau))
                .collect::<Result<Vec<_>>>()?
        }
    };

    Ok(spec
        .taus
        .iter()
        .zip(per_tau)
        .map(|(&tau, records)| VaRForecastSeries { model: spec.kind, tau, records })
        .collect())
}

fn annotate(e: Error, date: NaiveDate) -> Error {
    Error::Window { date, source: Box::new(e) }
}

fn realized_portfolio(data: &ModelData, day: usize, w: &[f64]) -> f64 {
    (0..data.n_assets()).map(|a| w[a] * data.returns.returns[(day, a)]).sum()
}

fn fit_next(problem: &QuantileProblem, previous: Option<&QuantileFit>) -> Result<QuantileFit> {
    match previous {
        Some(p) => fit_warm(problem, p),
        None => fit(problem),
    }
}

fn asset_series(
    spec: &ModelSpec,
    data: &ModelData,
    cfg: &RollingConfig,
    days: &[usize],
    omegas: &[DMatrix<f64>],
    tau: f64,
) -> Result<Vec<ForecastRecord>> {
    let mut previous: Option<QuantileFit> = None;
    let mut out = Vec::with_capacity(days.len());
    for (&t, omega) in days.iter().zip(omegas) {
        let record = (|| {
            let problem = build_design_range(spec, data, t - cfg.window..t, tau, cfg.lambda)?;
            let f = fit_next(&problem, previous.as_ref())?;
            let asset_vars: Vec<f64> = (0..data.n_assets())
                .map(|a| f.predict(a, &data.regressors_at(spec.kind, spec.lag_count, t, a)))
                .collect();
            let var_forecast = aggregate_var(&asset_vars, omega, &cfg.weights)?;
            previous = Some(f);
            Ok(ForecastRecord {
                day: t + 1,
                date: data.returns.dates[t + 1],
                var_forecast,
                realized_return: realized_portfolio(data, t + 1, &cfg.weights),
                asset_vars: Some(asset_vars),
                flag: None,
            })
        })()
        .map_err(|e| annotate(e, data.returns.dates[t]))?;
        out.push(record);
    }
    Ok(out)
}

fn portfolio_series(
    spec: &ModelSpec,
    data: &ModelData,
    r_p: &[f64],
    sigma_p: &[f64],
    cfg: &RollingConfig,
    days: &[usize],
    tau: f64,
) -> Result<Vec<ForecastRecord>> {
    let mut previous: Option<QuantileFit> = None;
    let mut out = Vec::with_capacity(days.len());
    for &t in days {
        let record = (|| {
            let problem = portfolio_design(r_p, sigma_p, spec.lag_count, t - cfg.window..t, tau)?;
            let f = fit_next(&problem, previous.as_ref())?;
            let regs: Vec<f64> = (0..spec.lag_count).map(|l| sigma_p[t - l]).collect();
            let var_forecast = f.predict(0, &regs);
            previous = Some(f);
            Ok(ForecastRecord {
                day: t + 1,
                date: data.returns.dates[t + 1],
                var_forecast,
                realized_return: r_p[t + 1],
                asset_vars: None,
                flag: None,
            })
        })()
        .map_err(|e| annotate(e, data.returns.dates[t]))?;
        out.push(record);
    }
    Ok(out)
}

fn riskmetrics_series(
    spec: &ModelSpec,
    data: &ModelData,
    cfg: &RollingConfig,
    days: &[usize],
) -> Result<Vec<Vec<ForecastRecord>>> {
    let first = days[0];
    // seeded on days 0..first, then one recursion step per later day
    let seed = data.returns.returns.rows(0, first).into_owned();
    let mut state = EwmaState::from_sample(&seed, RISKMETRICS_DECAY)?;
    // sigma_for[d - first] is the forecast for day d, conditional on days < d
    let mut sigma_for = vec![state.sigma.clone()];
    for d in first..data.n_days() - 1 {
        state = state.update(&data.returns.row(d))?;
        sigma_for.push(state.sigma.clone());
    }
    spec.taus
        .iter()
        .map(|&tau| {
            days.iter()
                .map(|&t| {
                    let sigma = &sigma_for[t + 1 - first];
                    let nv = normal_var(sigma, &cfg.weights, tau).map_err(|e| annotate(e, data.returns.dates[t]))?;
                    let gamma = if nv.degenerate_cutoff { 0.0 } else { standard_normal_quantile(tau) };
                    let asset_vars = (0..data.n_assets()).map(|a| gamma * sigma[(a, a)].max(0.0).sqrt()).collect();
                    Ok(ForecastRecord {
                        day: t + 1,
                        date: data.returns.dates[t + 1],
                        var_forecast: nv.value,
                        realized_return: realized_portfolio(data, t + 1, &cfg.weights),
                        asset_vars: Some(asset_vars),
                        flag: nv.degenerate_cutoff.then_some(ForecastFlag::DegenerateCutoff),
                    })
                })
                .collect()
        })
        .collect()
}

/// `date,model,tau,var_forecast,realized_return`
pub fn write_forecasts_csv<W: Write>(series: &[VaRForecastSeries], mut w: W) -> Result<()> {
    writeln!(w, "date,model,tau,var_forecast,realized_return")?;
    for s in series {
        for r in &s.records {
            writeln!(w, "{},{},{},{},{}", r.date, s.model, s.tau, r.var_forecast, r.realized_return)?;
        }
    }
    Ok(())
}

/// `date,model,tau,flag` for every flagged forecast.
pub fn write_flags_csv<W: Write>(series: &[VaRForecastSeries], mut w: W) -> Result<()> {
    writeln!(w, "date,model,tau,flag")?;
    for s in series {
        for r in &s.records {
            if let Some(ForecastFlag::DegenerateCutoff) = r.flag {
                writeln!(w, "{},{},{},DegenerateCutoff", r.date, s.model, s.tau)?;
            }
        }
    }
    Ok(())
}

/// Reads a forecast CSV back into per-(model, τ) series in file order.
pub fn read_forecasts_csv<R: Read>(reader: R) -> Result<Vec<VaRForecastSeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out: Vec<VaRForecastSeries> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::invalid(format!("forecast row {}: bad {what}", i + 2));
        if rec.len() != 5 {
            return Err(bad("field count"));
        }
        let date: NaiveDate = rec[0].parse().map_err(|_| bad("date"))?;
        let model: ModelKind = rec[1].parse()?;
        let tau: f64 = rec[2].parse().map_err(|_| bad("tau"))?;
        let var_forecast: f64 = rec[3].parse().map_err(|_| bad("var_forecast"))?;
        let realized_return: f64 = rec[4].parse().map_err(|_| bad("realized_return"))?;
        let pos = match out.iter().position(|s| s.model == model && s.tau == tau) {
            Some(p) => p,
            None => {
                out.push(VaRForecastSeries { model, tau, records: Vec::new() });
                out.len() - 1
            }
        };
        let day = out[pos].records.len();
        out[pos].records.push(ForecastRecord {
            day,
            date,
            var_forecast,
            realized_return,
            asset_vars: None,
            flag: None,
        });
    }
    for s in &out {
        if s.records.windows(2).any(|w| w[0].date >= w[1].date) {
            return Err(Error::invalid(format!("{} τ={}: dates not strictly increasing", s.model, s.tau)));
        }
    }
    Ok(out)
}
