//! Intraday price ingestion: previous-tick synchronization onto a fixed
//! session grid and open-to-close daily log-returns.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{Duration, NaiveDate, NaiveDateTime, NaiveTime};
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Exchange session window within a single calendar day.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Session {
    pub start: NaiveTime,
    pub end: NaiveTime,
}

impl Session {
    pub fn new(start: NaiveTime, end: NaiveTime) -> Result<Self> {
        if end <= start {
            return Err(Error::invalid("session end must be after session start"));
        }
        Ok(Self { start, end })
    }

    pub fn length_seconds(&self) -> i64 {
        (self.end - self.start).num_seconds()
    }

    /// Number of intraday returns `N` for a sampling interval.
    pub fn intervals(&self, grid_seconds: u32) -> Result<usize> {
        if grid_seconds == 0 {
            return Err(Error::invalid("grid_seconds must be positive"));
        }
        let len = self.length_seconds();
        if len % i64::from(grid_seconds) != 0 {
            return Err(Error::invalid(format!(
                "session length {len}s is not a multiple of the {grid_seconds}s grid"
            )));
        }
        Ok((len / i64::from(grid_seconds)) as usize)
    }

    fn grid_time(&self, date: NaiveDate, k: usize, grid_seconds: u32) -> NaiveDateTime {
        date.and_time(self.start) + Duration::seconds(k as i64 * i64::from(grid_seconds))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tick {
    pub timestamp: NaiveDateTime,
    pub asset: String,
    pub price: f64,
}

/// Synchronized grid of intraday log-prices, indexed `[day][asset][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntradayPanel {
    assets: Vec<String>,
    days: Vec<NaiveDate>,
    grid_seconds: u32,
    session: Session,
    log_prices: Vec<Vec<Vec<f64>>>,
}

impl IntradayPanel {
    pub fn new(
        assets: Vec<String>,
        days: Vec<NaiveDate>,
        grid_seconds: u32,
        session: Session,
        log_prices: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let n = session.intervals(grid_seconds)?;
        if log_prices.len() != days.len() {
            return Err(Error::invalid("one log-price block per day required"));
        }
        for (d, block) in log_prices.iter().enumerate() {
            if block.len() != assets.len() {
                return Err(Error::invalid(format!("day {} has {} assets", days[d], block.len())));
            }
            for (a, v) in block.iter().enumerate() {
                if v.len() != n + 1 {
                    return Err(Error::GridMismatch { asset: a, expected: n + 1, got: v.len() });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::invalid(format!("non-finite log price for {} on {}", assets[a], days[d])));
                }
            }
        }
        if days.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("days must be strictly increasing"));
        }
        Ok(Self { assets, days, grid_seconds, session, log_prices })
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn days(&self) -> &[NaiveDate] {
        &self.days
    }

    pub fn grid_seconds(&self) -> u32 {
        self.grid_seconds
    }

    pub fn session(&self) -> Session {
        self.session
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    /// Intraday returns per day, `N`.
    pub fn n_intervals(&self) -> usize {
        self.log_prices
            .first()
            .and_then(|b| b.first())
            .map_or(0, |v| v.len() - 1)
    }

    pub fn log_prices(&self, day: usize, asset: usize) -> &[f64] {
        &self.log_prices[day][asset]
    }

    pub fn intraday_returns(&self, day: usize, asset: usize) -> Vec<f64> {
        self.log_prices[day][asset].windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// All assets' intraday returns for one day.
    pub fn day_returns(&self, day: usize) -> Vec<Vec<f64>> {
        (0..self.n_assets()).map(|a| self.intraday_returns(day, a)).collect()
    }

    /// Grid points as ticks, the inverse of [`synchronize`] up to `ln(exp(x))` rounding.
    pub fn to_ticks(&self) -> Vec<Tick> {
        let mut out = Vec::with_capacity(self.n_days() * self.n_assets() * (self.n_intervals() + 1));
        for (d, date) in self.days.iter().enumerate() {
            for k in 0..=self.n_intervals() {
                let ts = self.session.grid_time(*date, k, self.grid_seconds);
                for (a, asset) in self.assets.iter().enumerate() {
                    out.push(Tick { timestamp: ts, asset: asset.clone(), price: self.log_prices[d][a][k].exp() });
                }
            }
        }
        out
    }

    /// Long-format audit dump: `date,asset,k,log_price`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "date,asset,k,log_price")?;
        for (d, date) in self.days.iter().enumerate() {
            for (a, asset) in self.assets.iter().enumerate() {
                for (k, lp) in self.log_prices[d][a].iter().enumerate() {
                    writeln!(w, "{date},{asset},{k},{lp}")?;
                }
            }
        }
        Ok(())
    }
}

/// Previous-tick synchronization onto `session` at `grid_seconds` spacing.
///
/// Each grid point takes the last observed price at or before it on the same
/// day. Grid points before the day's first observation take that first
/// observation. An asset without any observation on a trading day (a day on
/// which some asset traded) is an error.
pub fn synchronize(ticks: &[Tick], session: Session, grid_seconds: u32) -> Result<IntradayPanel> {
    let n = session.intervals(grid_seconds)?;
    let mut by_asset: BTreeMap<&str, BTreeMap<NaiveDate, Vec<(NaiveDateTime, f64)>>> = BTreeMap::new();
    for t in ticks {
        if !(t.price > 0.0) || !t.price.is_finite() {
            return Err(Error::invalid(format!("non-positive price {} for {} at {}", t.price, t.asset, t.timestamp)));
        }
        by_asset
            .entry(t.asset.as_str())
            .or_default()
            .entry(t.timestamp.date())
            .or_default()
            .push((t.timestamp, t.price));
    }
    if by_asset.is_empty() {
        return Err(Error::invalid("no ticks"));
    }
    let mut days: Vec<NaiveDate> = by_asset.values().flat_map(|m| m.keys().copied()).collect();
    days.sort_unstable();
    days.dedup();
    let assets: Vec<String> = by_asset.keys().map(|s| s.to_string()).collect();

    let mut log_prices = Vec::with_capacity(days.len());
    for date in &days {
        let mut block = Vec::with_capacity(assets.len());
        for (name, per_day) in &by_asset {
            let obs = per_day.get(date).ok_or_else(|| Error::MissingDay {
                asset: name.to_string(),
                date: *date,
            })?;
            let mut obs = obs.clone();
            obs.sort_by(|a, b| a.0.cmp(&b.0));
            let mut grid = Vec::with_capacity(n + 1);
            let mut j = 0usize;
            for k in 0..=n {
                let g = session.grid_time(*date, k, grid_seconds);
                while j + 1 < obs.len() && obs[j + 1].0 <= g {
                    j += 1;
                }
                grid.push(obs[j].1.ln());
            }
            block.push(grid);
        }
        log_prices.push(block);
    }
    IntradayPanel::new(assets, days, grid_seconds, session, log_prices)
}

/// Daily log-returns, `T × n`, aligned with the panel's days.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyPanel {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub returns: DMatrix<f64>,
}

impl DailyPanel {
    pub fn n_days(&self) -> usize {
        self.returns.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.returns.ncols()
    }

    pub fn row(&self, day: usize) -> Vec<f64> {
        self.returns.row(day).iter().copied().collect()
    }
}

/// Open-to-close log return of each session.
pub fn daily_returns(panel: &IntradayPanel) -> Result<DailyPanel> {
    if panel.n_days() == 0 || panel.n_assets() == 0 {
        return Err(Error::invalid("empty panel"));
    }
    let returns = DMatrix::from_fn(panel.n_days(), panel.n_assets(), |d, a| {
        let lp = panel.log_prices(d, a);
        lp[lp.len() - 1] - lp[0]
    });
    Ok(DailyPanel { dates: panel.days.clone(), assets: panel.assets.clone(), returns })
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    chrono::DateTime::parse_from_rfc3339(s).ok().map(|t| t.naive_local())
}

/// Reads `timestamp_iso8601,asset_id,price` rows. A header row is optional.
pub fn read_ticks<R: Read>(reader: R) -> Result<Vec<Tick>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::invalid(format!("line {}: expected 3 fields, got {}", line + 1, rec.len())));
        }
        let Some(timestamp) = parse_timestamp(&rec[0]) else {
            if line == 0 {
                continue;
            }
            return Err(Error::invalid(format!("line {}: bad timestamp `{}`", line + 1, &rec[0])));
        };
        let price: f64 = rec[2]
            .parse()
            .map_err(|_| Error::invalid(format!("line {}: bad price `{}`", line + 1, &rec[2])))?;
        out.push(Tick { timestamp, asset: rec[1].to_string(), price });
    }
    Ok(out)
}

pub fn write_ticks<W: Write>(ticks: &[Tick], mut w: W) -> Result<()> {
    writeln!(w, "timestamp_iso8601,asset_id,price")?;
    for t in ticks {
        writeln!(w, "{},{},{}", t.timestamp.format("%Y-%m-%dT%H:%M:%S"), t.asset, t.price)?;
    }
    Ok(())
}
