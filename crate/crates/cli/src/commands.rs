//! Subcommand implementations. Each stage writes its files as soon as it
//! finishes, so a failure later in the pipeline leaves the earlier outputs.

use std::fs::{self, File};
use std::io::BufReader;

use panelvar_core::backtest::{backtest_series, dm_comparisons, write_backtest_csv, write_dm_csv, BacktestConfig};
use panelvar_core::market_data::read_ticks;
use panelvar_core::models::{build_design, portfolio_design, portfolio_uqr_series};
use panelvar_core::portfolio::{annualize_return, annualize_var, build_xi, frontier_point};
use panelvar_core::realized::{compute_measures, correlation_from_covariance, write_covariance_csv, write_measures_csv};
use panelvar_core::simulate::simulate_paths;
use panelvar_core::study::{gmvar_level, run_study, ReplicationResult, StudyResults};
use panelvar_core::var::{read_forecasts_csv, write_flags_csv, write_forecasts_csv};
use panelvar_core::{
    daily_returns, fit, synchronize, Error, IntradayPanel, ModelData, ModelKind, ModelSpec, RollingConfig, Session,
    VaRForecastSeries,
};
use rayon::prelude::*;

use crate::config::{RunConfig, Source, WeightsMode};
use crate::error::CliError;
use crate::output::Outputs;

pub struct Loaded {
    pub assets: Vec<String>,
    pub data: ModelData,
    pub weights: Vec<f64>,
}

fn intraday_panel(cfg: &RunConfig) -> Result<IntradayPanel, CliError> {
    match &cfg.source {
        Source::Simulate(_) => Ok(simulate_paths(&cfg.sim_config(), None)?.panel),
        Source::Data(path) => {
            let file = File::open(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            let ticks = read_ticks(BufReader::new(file))?;
            let session = Session::new(cfg.session_start, cfg.session_end)?;
            Ok(synchronize(&ticks, session, cfg.grid_seconds)?)
        }
    }
}

fn weights(cfg: &RunConfig, n: usize) -> Result<Vec<f64>, CliError> {
    match &cfg.weights {
        WeightsMode::Equal => Ok(vec![1.0 / n as f64; n]),
        WeightsMode::File(path) => {
            let text = fs::read_to_string(path)?;
            let w = text
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|_| CliError::Usage(format!("bad weight `{s}` in {}", path.display()))))
                .collect::<Result<Vec<_>, _>>()?;
            if w.len() != n {
                return Err(CliError::Usage(format!("{} weights for {n} assets", w.len())));
            }
            Ok(w)
        }
    }
}

pub fn load(cfg: &RunConfig) -> Result<Loaded, CliError> {
    let panel = intraday_panel(cfg)?;
    let data = ModelData::new(daily_returns(&panel)?, compute_measures(&panel)?)?;
    let weights = weights(cfg, data.n_assets())?;
    Ok(Loaded { assets: panel.assets().to_vec(), data, weights })
}

fn require_simulation(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    match cfg.source {
        Source::Simulate(_) => Ok(()),
        Source::Data(_) => Err(CliError::Usage(format!("`{command}` needs a simulated data source"))),
    }
}

/// `prices.csv` in the tick ingestion schema plus the `ledger.csv` of true variation.
pub fn simulate(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    require_simulation(cfg, "simulate")?;
    let sim = simulate_paths(&cfg.sim_config(), None)?;
    out.write("prices.csv", |w| Ok(panelvar_core::market_data::write_ticks(&sim.panel.to_ticks(), w)?))?;
    out.write("ledger.csv", |w| Ok(sim.write_ledger_csv(w)?))
}

pub fn measures(loaded: &Loaded, out: &mut Outputs) -> Result<(), CliError> {
    out.write("measures.csv", |w| Ok(write_measures_csv(&loaded.data.measures, &loaded.assets, w)?))?;
    out.write("covariance.csv", |w| Ok(write_covariance_csv(&loaded.data.measures, &loaded.assets, w)?))
}

/// Full-sample fits of every regression model at every in-sample quantile.
pub fn fit_models(cfg: &RunConfig, loaded: &Loaded, out: &mut Outputs) -> Result<(), CliError> {
    let jobs: Vec<(ModelKind, f64)> = cfg
        .models
        .iter()
        .filter(|m| **m != ModelKind::RiskMetrics)
        .flat_map(|&m| cfg.in_sample_taus.iter().map(move |&t| (m, t)))
        .collect();
    let fits = jobs
        .par_iter()
        .map(|&(model, tau)| {
            let problem = if model == ModelKind::PortfolioUqr {
                let covs: Vec<_> = loaded.data.measures.iter().map(|m| m.cov.clone()).collect();
                let (r_p, sigma_p) = portfolio_uqr_series(&loaded.data.returns, &covs, &loaded.weights)?;
                let start = cfg.lags - 1;
                portfolio_design(&r_p, &sigma_p, cfg.lags, start..r_p.len() - 1, tau)?
            } else {
                build_design(&ModelSpec::new(model, cfg.lags, vec![tau])?, &loaded.data, tau, cfg.lambda)?
            };
            Ok((model, tau, fit(&problem)?))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    out.write("fit.csv", |w| {
        writeln!(w, "model,tau,parameter,estimate")?;
        for (model, tau, f) in &fits {
            for (name, value) in f.parameter_names.iter().zip(f.parameters()) {
                writeln!(w, "{model},{tau},{name},{value}")?;
            }
        }
        Ok(())
    })
}

pub fn forecast_series(cfg: &RunConfig, loaded: &Loaded) -> Result<Vec<VaRForecastSeries>, CliError> {
    let rolling = RollingConfig { window: cfg.window, lambda: cfg.lambda, weights: loaded.weights.clone() };
    let per_model = cfg
        .models
        .par_iter()
        .map(|&model| panelvar_core::rolling_forecast(&ModelSpec::new(model, cfg.lags, cfg.taus.clone())?, &loaded.data, &rolling))
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(per_model.into_iter().flatten().collect())
}

pub fn write_forecasts(series: &[VaRForecastSeries], out: &mut Outputs) -> Result<(), CliError> {
    out.write("forecasts.csv", |w| Ok(write_forecasts_csv(series, w)?))?;
    out.write("flags.csv", |w| Ok(write_flags_csv(series, w)?))
}

fn dq_seed(seed: u64, series: usize) -> u64 {
    seed ^ (series as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Hit rates, tick losses, DQ and pairwise DM tests plus the Panel A and B layouts.
pub fn backtest(cfg: &RunConfig, series: &[VaRForecastSeries], out: &mut Outputs) -> Result<(), CliError> {
    let reports = series
        .par_iter()
        .enumerate()
        .map(|(i, s)| backtest_series(s, &BacktestConfig { lags: cfg.dq_lags, mc_reps: cfg.mc_reps, seed: dq_seed(cfg.seed, i) }))
        .collect::<Result<Vec<_>, Error>>()?;
    let dm = dm_comparisons(series)?;
    out.write("backtest.csv", |w| Ok(write_backtest_csv(&reports, w)?))?;
    out.write("dm.csv", |w| Ok(write_dm_csv(&dm, w)?))?;
    let single = StudyResults {
        config: cfg.study_config(),
        replications: vec![ReplicationResult {
            replication: 0,
            coefficients: Vec::new(),
            backtests: reports,
            dm,
            gmvar: Vec::new(),
        }],
    };
    out.write("panel_a.csv", |w| Ok(single.write_panel_a_csv(w)?))?;
    out.write("panel_b.csv", |w| Ok(single.write_panel_b_csv(w)?))
}

pub fn backtest_input(cfg: &RunConfig) -> Result<Option<Vec<VaRForecastSeries>>, CliError> {
    let Some(path) = &cfg.forecasts else { return Ok(None) };
    let file = File::open(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(Some(read_forecasts_csv(BufReader::new(file))?))
}

/// GMVaR levels and, for left-tail quantiles, the long-only VaR-return
/// frontier on the last forecast day. Expected returns are the window means.
pub fn portfolio(cfg: &RunConfig, loaded: &Loaded, series: &[VaRForecastSeries], out: &mut Outputs) -> Result<(), CliError> {
    let with_vars: Vec<&VaRForecastSeries> =
        series.iter().filter(|s| s.records.iter().all(|r| r.asset_vars.is_some())).collect();
    if cfg.gmvar {
        let levels = with_vars.par_iter().map(|s| gmvar_level(&loaded.data, s)).collect::<Result<Vec<_>, Error>>()?;
        out.write("gmvar.csv", |w| {
            writeln!(w, "model,tau,gmvar_annualized,skipped_days")?;
            for g in &levels {
                let level = if g.level.is_finite() { g.level.to_string() } else { "NA".into() };
                writeln!(w, "{},{},{level},{}", g.model, g.tau, g.skipped_days)?;
            }
            Ok(())
        })?;
    }
    if cfg.frontier {
        let mut rows = Vec::new();
        for s in with_vars.iter().filter(|s| s.tau < 0.5) {
            let Some(last) = s.records.last() else { continue };
            let vars = last.asset_vars.as_ref().expect("filtered on asset VaRs");
            let omega = correlation_from_covariance(&loaded.data.measures[last.day].cov)?;
            let xi = build_xi(vars, &omega)?.xi;
            let from = last.day.saturating_sub(cfg.window);
            let mu: Vec<f64> = (0..loaded.data.n_assets())
                .map(|a| (from..last.day).map(|d| loaded.data.returns.returns[(d, a)]).sum::<f64>() / (last.day - from) as f64)
                .collect();
            let lo = mu.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for k in 0..cfg.frontier_points {
                let target = lo + (hi - lo) * k as f64 / (cfg.frontier_points - 1) as f64;
                match frontier_point(&xi, &mu, target.min(hi)) {
                    Ok(p) => rows.push((s.model, s.tau, annualize_return(p.target), Some((annualize_var(p.var), p.weights)))),
                    Err(Error::SingularXi(_) | Error::QpFailure(_)) => rows.push((s.model, s.tau, annualize_return(target), None)),
                    Err(e) => return Err(e.into()),
                }
            }
        }
        out.write("frontier.csv", |w| {
            write!(w, "model,tau,target_return,portfolio_var")?;
            for a in &loaded.assets {
                write!(w, ",w_{a}")?;
            }
            writeln!(w)?;
            for (model, tau, target, point) in &rows {
                write!(w, "{model},{tau},{target}")?;
                match point {
                    Some((var, weights)) => {
                        write!(w, ",{var}")?;
                        for x in weights {
                            write!(w, ",{x}")?;
                        }
                    }
                    None => write!(w, ",NA{}", ",NA".repeat(loaded.assets.len()))?,
                }
                writeln!(w)?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

/// The Monte-Carlo study across replications.
pub fn study(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    require_simulation(cfg, "study")?;
    let results = run_study(&cfg.study_config())?;
    out.write("coefficients.csv", |w| Ok(results.write_coefficients_csv(w)?))?;
    if cfg.statistical {
        out.write("backtests.csv", |w| Ok(results.write_backtests_csv(w)?))?;
        out.write("panel_a.csv", |w| Ok(results.write_panel_a_csv(w)?))?;
        out.write("panel_b.csv", |w| Ok(results.write_panel_b_csv(w)?))?;
    }
    if cfg.gmvar {
        out.write("gmvar.csv", |w| Ok(results.write_gmvar_csv(w)?))?;
    }
    Ok(())
}

/// Full pipeline on one data set: measures, fits, forecasts, backtests and portfolios.
pub fn pipeline(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let loaded = load(cfg)?;
    measures(&loaded, out)?;
    fit_models(cfg, &loaded, out)?;
    let series = forecast_series(cfg, &loaded)?;
    write_forecasts(&series, out)?;
    if cfg.statistical {
        backtest(cfg, &series, out)?;
    }
    portfolio(cfg, &loaded, &series, out)
}
