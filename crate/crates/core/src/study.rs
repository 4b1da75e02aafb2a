//! Monte-Carlo study: simulate panels, fit the models in sample, run the
//! rolling out-of-sample forecasts, backtest them and evaluate the global
//! minimum-VaR portfolios, then summarize across replications.

use std::io::Write;

use rayon::prelude::*;

use crate::backtest::{backtest_series, dm_comparisons, BacktestConfig, BacktestReport, DmComparison};
use crate::error::{Error, Result};
use crate::market_data::daily_returns;
use crate::models::{build_design, portfolio_design, portfolio_uqr_series, ModelData, ModelKind, ModelSpec};
use crate::portfolio::{annualize_var, build_xi, gmvar_value, gmvar_weights};
use crate::qreg::fit;
use crate::realized::{compute_measures, correlation_from_covariance};
use crate::simulate::{simulate_paths, SimConfig};
use crate::var::{rolling_forecast, RollingConfig, VaRForecastSeries};

pub const DEFAULT_TAUS: [f64; 7] = [0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95];

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    /// Base simulation settings; the replication index is set per run.
    pub sim: SimConfig,
    pub replications: usize,
    pub models: Vec<ModelKind>,
    /// Quantiles of the in-sample coefficient table.
    pub in_sample_taus: Vec<f64>,
    /// Quantiles forecast and backtested out of sample.
    pub taus: Vec<f64>,
    pub window: usize,
    pub lambda: f64,
    pub lag_count: usize,
    pub dq_lags: usize,
    pub mc_reps: usize,
    /// Significance level of the DQ and DM tests.
    pub level: f64,
    pub out_of_sample: bool,
    pub gmvar: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            replications: 20,
            models: vec![ModelKind::PqrRv, ModelKind::PqrRsv, ModelKind::PqrBpv, ModelKind::UqrRv, ModelKind::RiskMetrics],
            in_sample_taus: DEFAULT_TAUS.to_vec(),
            taus: DEFAULT_TAUS.to_vec(),
            window: 1000,
            lambda: 0.0,
            lag_count: 1,
            dq_lags: crate::backtest::DEFAULT_DQ_LAGS,
            mc_reps: crate::backtest::DEFAULT_MC_REPS,
            level: 0.05,
            out_of_sample: true,
            gmvar: true,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.replications == 0 {
            return Err(Error::invalid("at least one replication is required"));
        }
        for &t in self.taus.iter().chain(&self.in_sample_taus) {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::invalid(format!("tau must lie in (0,1), got {t}")));
            }
        }
        if self.out_of_sample && self.window + 1 >= self.sim.days {
            return Err(Error::invalid(format!("window {} leaves no forecasts in {} days", self.window, self.sim.days)));
        }
        if self.lag_count == 0 || !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::invalid("lag_count must be positive and level in (0,1)"));
        }
        Ok(())
    }

    fn weights(&self) -> Vec<f64> {
        vec![1.0 / self.sim.n_assets as f64; self.sim.n_assets]
    }
}

/// One in-sample slope estimate, averaged over assets for univariate models.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientRecord {
    pub model: ModelKind,
    pub tau: f64,
    pub parameter: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmvarRecord {
    pub model: ModelKind,
    pub tau: f64,
    /// Mean annualized `√(w'Ξw)` over the forecast days.
    pub level: f64,
    /// Days skipped because `Ξ` was singular.
    pub skipped_days: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationResult {
    pub replication: usize,
    pub coefficients: Vec<CoefficientRecord>,
    pub backtests: Vec<BacktestReport>,
    pub dm: Vec<DmComparison>,
    pub gmvar: Vec<GmvarRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResults {
    pub config: StudyConfig,
    pub replications: Vec<ReplicationResult>,
}

/// Runs every replication; replication `r` draws from RNG streams derived
/// from `(seed, r)`, so results do not depend on scheduling.
pub fn run_study(config: &StudyConfig) -> Result<StudyResults> {
    config.validate()?;
    let replications = (0..config.replications)
        .into_par_iter()
        .map(|r| run_replication(config, r).map_err(|e| Error::Replication { index: r, source: Box::new(e) }))
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyResults { config: config.clone(), replications })
}

/// Simulated data of one replication, ready for modelling.
pub fn replication_data(config: &StudyConfig, replication: usize) -> Result<ModelData> {
    let sim = SimConfig { replication: replication as u64, ..config.sim.clone() };
    let out = simulate_paths(&sim, None)?;
    let measures = compute_measures(&out.panel)?;
    let returns = daily_returns(&out.panel)?;
    ModelData::new(returns, measures)
}

pub fn run_replication(config: &StudyConfig, replication: usize) -> Result<ReplicationResult> {
    let data = replication_data(config, replication)?;
    let weights = config.weights();

    let mut coefficients = Vec::new();
    for &model in config.models.iter().filter(|m| **m != ModelKind::RiskMetrics) {
        for &tau in &config.in_sample_taus {
            coefficients.extend(in_sample(config, &data, &weights, model, tau)?);
        }
    }

    let (mut backtests, mut dm, mut gmvar) = (Vec::new(), Vec::new(), Vec::new());
    if config.out_of_sample {
        let rolling = RollingConfig { window: config.window, lambda: config.lambda, weights: weights.clone() };
        let mut series: Vec<VaRForecastSeries> = Vec::new();
        for &model in &config.models {
            let spec = ModelSpec::new(model, config.lag_count, config.taus.clone())?;
            series.extend(rolling_forecast(&spec, &data, &rolling)?);
        }
        let bt = BacktestConfig { lags: config.dq_lags, mc_reps: config.mc_reps, seed: config.sim.seed };
        backtests = series
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let cfg = BacktestConfig { seed: dq_seed(bt.seed, replication, i), ..bt.clone() };
                backtest_series(s, &cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        dm = dm_comparisons(&series)?;
        if config.gmvar {
            for s in series.iter().filter(|s| s.records.iter().all(|r| r.asset_vars.is_some())) {
                gmvar.push(gmvar_level(&data, s)?);
            }
        }
    }
    Ok(ReplicationResult { replication, coefficients, backtests, dm, gmvar })
}

fn dq_seed(seed: u64, replication: usize, series: usize) -> u64 {
    seed ^ ((replication as u64) << 32 | series as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn in_sample(
    config: &StudyConfig,
    data: &ModelData,
    weights: &[f64],
    model: ModelKind,
    tau: f64,
) -> Result<Vec<CoefficientRecord>> {
    let spec = ModelSpec::new(model, config.lag_count, vec![tau])?;
    let names = spec.slope_names();
    let slopes: Vec<f64> = if model == ModelKind::PortfolioUqr {
        let covs: Vec<_> = data.measures.iter().map(|m| m.cov.clone()).collect();
        let (r_p, sigma_p) = portfolio_uqr_series(&data.returns, &covs, weights)?;
        let start = config.lag_count - 1;
        let f = fit(&portfolio_design(&r_p, &sigma_p, config.lag_count, start..r_p.len() - 1, tau)?)?;
        f.slopes.for_asset(0).to_vec()
    } else {
        let f = fit(&build_design(&spec, data, tau, config.lambda)?)?;
        let n = f.alphas.len() as f64;
        (0..names.len())
            .map(|j| (0..f.alphas.len()).map(|a| f.slopes.for_asset(a)[j]).sum::<f64>() / n)
            .collect()
    };
    Ok(names
        .into_iter()
        .zip(slopes)
        .map(|(parameter, value)| CoefficientRecord { model, tau, parameter, value })
        .collect())
}

/// Mean annualized GMVaR over the forecast days, with `Ξ` built from the
/// per-asset VaR forecasts and the realized correlation of the target day.
pub fn gmvar_level(data: &ModelData, series: &VaRForecastSeries) -> Result<GmvarRecord> {
    let (mut total, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for r in &series.records {
        let vars = r.asset_vars.as_ref().ok_or_else(|| Error::invalid("series lacks per-asset VaRs"))?;
        let omega = correlation_from_covariance(&data.measures[r.day].cov)?;
        let xi = build_xi(vars, &omega)?.xi;
        match gmvar_weights(&xi) {
            Ok(w) => {
                total += annualize_var(gmvar_value(&xi, &w)?.1);
                used += 1;
            }
            Err(Error::SingularXi(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let level = if used > 0 { total / used as f64 } else { f64::NAN };
    Ok(GmvarRecord { model: series.model, tau: series.tau, level, skipped_days: skipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSummary {
    pub model: ModelKind,
    pub tau: f64,
    pub parameter: String,
    pub mean: f64,
    pub std_dev: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelARow {
    pub model: String,
    pub tau: f64,
    pub tau_hat_avg: f64,
    pub tau_hat_max: f64,
    pub tau_hat_min: f64,
    /// Mean absolute deviation of the hit rate from `τ`.
    pub tau_hat_avg_dev: f64,
    /// Share of replications whose DQ test rejects at the study level.
    pub dq_violations: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelBRow {
    pub tau: f64,
    pub row_model: String,
    pub column_model: String,
    /// Share of replications in which the row model has significantly lower
    /// tick loss than the column model.
    pub row_wins: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

impl StudyResults {
    /// Mean and standard deviation of every in-sample slope across replications.
    pub fn coefficient_table(&self) -> Vec<CoefficientSummary> {
        let Some(first) = self.replications.first() else { return Vec::new() };
        first
            .coefficients
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let values: Vec<f64> = self.replications.iter().map(|r| r.coefficients[i].value).collect();
                let (mean, std_dev) = mean_sd(&values);
                CoefficientSummary { model: c.model, tau: c.tau, parameter: c.parameter.clone(), mean, std_dev }
            })
            .collect()
    }

    pub fn mean_coefficient(&self, model: ModelKind, tau: f64, parameter: &str) -> Option<f64> {
        self.coefficient_table()
            .into_iter()
            .find(|c| c.model == model && c.tau == tau && c.parameter == parameter)
            .map(|c| c.mean)
    }

    pub fn panel_a(&self) -> Vec<PanelARow> {
        let Some(first) = self.replications.first() else { return Vec::new() };
        first
            .backtests
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let rates: Vec<f64> = self.replications.iter().map(|r| r.backtests[i].hit_rate).collect();
                let n = rates.len() as f64;
                let rejections =
                    self.replications.iter().filter(|r| r.backtests[i].dq.p_value < self.config.level).count();
                PanelARow {
                    model: b.model.clone(),
                    tau: b.tau,
                    tau_hat_avg: rates.iter().sum::<f64>() / n,
                    tau_hat_max: rates.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    tau_hat_min: rates.iter().copied().fold(f64::INFINITY, f64::min),
                    tau_hat_avg_dev: rates.iter().map(|h| (h - b.tau).abs()).sum::<f64>() / n,
                    dq_violations: rejections as f64 / n,
                }
            })
            .collect()
    }

    /// Pairwise dominance shares in both directions for every compared pair.
    pub fn panel_b(&self) -> Vec<PanelBRow> {
        let Some(first) = self.replications.first() else { return Vec::new() };
        let n = self.replications.len() as f64;
        let level = self.config.level;
        let mut rows = Vec::new();
        for (i, c) in first.dm.iter().enumerate() {
            let results = self.replications.iter().map(|r| &r.dm[i].result);
            let a_wins = results.clone().filter(|d| d.p_value < level && d.statistic < 0.0).count();
            let b_wins = results.filter(|d| d.p_value < level && d.statistic > 0.0).count();
            rows.push(PanelBRow {
                tau: c.tau,
                row_model: c.model_a.clone(),
                column_model: c.model_b.clone(),
                row_wins: a_wins as f64 / n,
            });
            rows.push(PanelBRow {
                tau: c.tau,
                row_model: c.model_b.clone(),
                column_model: c.model_a.clone(),
                row_wins: b_wins as f64 / n,
            });
        }
        rows
    }

    pub fn dominance(&self, tau: f64, row: ModelKind, column: ModelKind) -> Option<f64> {
        self.panel_b()
            .into_iter()
            .find(|r| r.tau == tau && r.row_model == row.name() && r.column_model == column.name())
            .map(|r| r.row_wins)
    }

    pub fn panel_a_row(&self, model: ModelKind, tau: f64) -> Option<PanelARow> {
        self.panel_a().into_iter().find(|r| r.model == model.name() && r.tau == tau)
    }

    /// GMVaR level of `model` at `tau` in every replication.
    pub fn gmvar_levels(&self, model: ModelKind, tau: f64) -> Vec<f64> {
        self.replications
            .iter()
            .filter_map(|r| r.gmvar.iter().find(|g| g.model == model && g.tau == tau).map(|g| g.level))
            .collect()
    }

    /// `model,tau,parameter,mean,std_dev`
    pub fn write_coefficients_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "model,tau,parameter,mean,std_dev")?;
        for c in self.coefficient_table() {
            writeln!(w, "{},{},{},{},{}", c.model, c.tau, c.parameter, c.mean, c.std_dev)?;
        }
        Ok(())
    }

    /// `model,tau,tau_hat_avg,tau_hat_max,tau_hat_min,tau_hat_avg_dev,dq_violations`, shares in percent.
    pub fn write_panel_a_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "model,tau,tau_hat_avg,tau_hat_max,tau_hat_min,tau_hat_avg_dev,dq_violations")?;
        for r in self.panel_a() {
            writeln!(
                w,
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.model,
                r.tau,
                100.0 * r.tau_hat_avg,
                100.0 * r.tau_hat_max,
                100.0 * r.tau_hat_min,
                100.0 * r.tau_hat_avg_dev,
                100.0 * r.dq_violations
            )?;
        }
        Ok(())
    }

    /// `tau,row_model,column_model,row_wins_pct`
    pub fn write_panel_b_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "tau,row_model,column_model,row_wins_pct")?;
        let rows = self.panel_b();
        if rows.is_empty() {
            writeln!(w, "NA,NA,NA,NA")?;
        }
        for r in rows {
            writeln!(w, "{},{},{},{:.4}", r.tau, r.row_model, r.column_model, 100.0 * r.row_wins)?;
        }
        Ok(())
    }

    /// `replication,model,tau,gmvar_annualized,skipped_days`
    pub fn write_gmvar_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "replication,model,tau,gmvar_annualized,skipped_days")?;
        for r in &self.replications {
            for g in &r.gmvar {
                writeln!(w, "{},{},{},{},{}", r.replication, g.model, g.tau, g.level, g.skipped_days)?;
            }
        }
        Ok(())
    }

    /// Per-replication backtest rows:
    /// `replication,model,tau,hit_rate,tick_loss,dq_statistic,dq_p_value,dq_separation`
    pub fn write_backtests_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "replication,model,tau,hit_rate,tick_loss,dq_statistic,dq_p_value,dq_separation")?;
        for r in &self.replications {
            for b in &r.backtests {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    r.replication, b.model, b.tau, b.hit_rate, b.tick_loss, b.dq.statistic, b.dq.p_value, b.dq.separation
                )?;
            }
        }
        Ok(())
    }
}
