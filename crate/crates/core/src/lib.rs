//! Conditional return quantiles for panels of assets from realized
//! volatility measures, with portfolio Value-at-Risk forecasting,
//! backtesting, VaR-based portfolio construction and a Monte-Carlo
//! jump-diffusion generator.

pub mod backtest;
pub mod error;
pub mod market_data;
pub mod models;
pub mod portfolio;
pub mod qreg;
pub mod realized;
pub mod rng;
pub mod simulate;
pub mod study;
pub mod var;

pub use error::{Error, Result};
pub use market_data::{daily_returns, synchronize, DailyPanel, IntradayPanel, Session, Tick};
pub use qreg::{fit, fit_warm, FitMode, QuantileFit, QuantileProblem, Slopes};
pub use models::{ModelData, ModelKind, ModelSpec};
pub use realized::{AssetMeasures, RealizedDay};
pub use var::{aggregate_var, normal_var, rolling_forecast, ForecastRecord, RollingConfig, VaRForecastSeries};
