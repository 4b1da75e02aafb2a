//! `panelvar`: realized measures, panel quantile regression fits, rolling
//! portfolio VaR forecasts, backtests, VaR-based portfolios and the
//! Monte-Carlo study from the command line.

mod commands;
mod config;
mod error;
mod output;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{merge, parse_settings, RunConfig};
use crate::error::CliError;
use crate::output::Outputs;

#[derive(Parser)]
#[command(name = "panelvar", version, about = "Panel quantile regression VaR toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Realized measures and covariances of the input data.
    Measures(Flags),
    /// Full-sample quantile regression fits.
    Fit(Flags),
    /// Rolling one-step-ahead portfolio VaR forecasts.
    Forecast(Flags),
    /// Coverage, DQ and DM backtests of rolling (or supplied) forecasts.
    Backtest(Flags),
    /// Global minimum-VaR portfolios and the VaR-return frontier.
    Portfolio(Flags),
    /// Simulated tick data and its ledger of true variation.
    Simulate(Flags),
    /// Monte-Carlo study over replications of simulated panels.
    Study(Flags),
    /// Full pipeline on `--data`, or the study on a simulated source.
    Run(Flags),
}

#[derive(Args, Default)]
struct Flags {
    /// Flat `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Regression pairs per rolling estimation window.
    #[arg(long)]
    window: Option<usize>,
    /// Penalty on the fixed effects.
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated quantile levels.
    #[arg(long)]
    taus: Option<String>,
    /// Comma-separated models, e.g. `pqr-rv,uqr-rv,riskmetrics`.
    #[arg(long)]
    models: Option<String>,
    #[arg(long)]
    replications: Option<usize>,
    /// Tick CSV `timestamp_iso8601,asset_id,price`.
    #[arg(long, conflicts_with = "simulate")]
    data: Option<PathBuf>,
    /// Simulate the data with this error distribution: mvn, mt9, normal or t9.
    #[arg(long)]
    simulate: Option<String>,
    /// Forecast CSV to backtest instead of recomputing forecasts.
    #[arg(long)]
    forecasts: Option<PathBuf>,
    /// Any other configuration setting, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Flags {
    fn settings(&self) -> Result<BTreeMap<String, String>, CliError> {
        let mut text = String::new();
        for s in &self.set {
            text.push_str(s);
            text.push('\n');
        }
        let mut m = parse_settings(&text)?;
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("seed", self.seed.map(|v| v.to_string()));
        put("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()));
        put("window", self.window.map(|v| v.to_string()));
        put("lambda", self.lambda.map(|v| v.to_string()));
        put("taus", self.taus.clone());
        put("models", self.models.clone());
        put("replications", self.replications.map(|v| v.to_string()));
        put("data", self.data.as_ref().map(|p| p.display().to_string()));
        put("simulate", self.simulate.clone());
        put("forecasts", self.forecasts.as_ref().map(|p| p.display().to_string()));
        Ok(m)
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("PANELVAR_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("PANELVAR_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the worker pool: {e}")))
}

fn resolve(flags: &Flags) -> (BTreeMap<String, String>, Result<RunConfig, CliError>) {
    let file = match &flags.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => parse_settings(&text),
            Err(e) => Err(CliError::Usage(format!("cannot read {}: {e}", path.display()))),
        },
        None => Ok(BTreeMap::new()),
    };
    let (file, file_err) = match file {
        Ok(f) => (f, None),
        Err(e) => (BTreeMap::new(), Some(e)),
    };
    let settings = match flags.settings() {
        Ok(f) => merge(file, f),
        Err(e) => {
            let mut file = file;
            if let Some(dir) = &flags.out_dir {
                file.insert("out_dir".into(), dir.display().to_string());
            }
            return (file, Err(e));
        }
    };
    let cfg = match file_err {
        Some(e) => Err(e),
        None => RunConfig::from_settings(&settings),
    };
    (settings, cfg)
}

fn execute(name: &str, cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    match name {
        "simulate" => commands::simulate(cfg, out),
        "study" => commands::study(cfg, out),
        "run" => match cfg.source {
            config::Source::Data(_) => commands::pipeline(cfg, out),
            config::Source::Simulate(_) => commands::study(cfg, out),
        },
        "backtest" => {
            let series = match commands::backtest_input(cfg)? {
                Some(s) => s,
                None => {
                    let loaded = commands::load(cfg)?;
                    commands::forecast_series(cfg, &loaded)?
                }
            };
            commands::backtest(cfg, &series, out)
        }
        _ => {
            let loaded = commands::load(cfg)?;
            match name {
                "measures" => commands::measures(&loaded, out),
                "fit" => commands::fit_models(cfg, &loaded, out),
                "forecast" => {
                    let series = commands::forecast_series(cfg, &loaded)?;
                    commands::write_forecasts(&series, out)
                }
                "portfolio" => {
                    let series = commands::forecast_series(cfg, &loaded)?;
                    commands::portfolio(cfg, &loaded, &series, out)
                }
                other => unreachable!("unknown command {other}"),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, flags) = match &cli.command {
        Command::Measures(f) => ("measures", f),
        Command::Fit(f) => ("fit", f),
        Command::Forecast(f) => ("forecast", f),
        Command::Backtest(f) => ("backtest", f),
        Command::Portfolio(f) => ("portfolio", f),
        Command::Simulate(f) => ("simulate", f),
        Command::Study(f) => ("study", f),
        Command::Run(f) => ("run", f),
    };

    let (settings, cfg) = resolve(flags);
    let out_dir = settings.get("out_dir").map_or_else(|| RunConfig::default().out_dir, PathBuf::from);
    let mut out = Outputs::new(&out_dir);
    let outcome = match (cfg, configure_threads()) {
        (Err(e), _) => Err((None, e)),
        (Ok(cfg), Err(e)) => Err((Some(cfg), e)),
        (Ok(cfg), Ok(())) => match execute(name, &cfg, &mut out) {
            Ok(()) => Ok(cfg),
            Err(e) => Err((Some(cfg), e)),
        },
    };
    let (config, failure) = match &outcome {
        Ok(c) => (Some(c), None),
        Err((c, e)) => (c.as_ref(), Some(e)),
    };
    if let Err(e) = out.manifest(name, config, failure) {
        eprintln!("error: cannot write manifest: {e}");
        if failure.is_none() {
            return ExitCode::FAILURE;
        }
    }
    match outcome {
        Ok(_) => ExitCode::SUCCESS,
        Err((_, e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
