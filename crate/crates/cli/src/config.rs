//! Run configuration: a flat `key = value` file overlaid by command-line flags.
//!
//! Grammar: one setting per line, `key = value`; blank lines and lines
//! starting with `#` are ignored; lists are comma separated. Unknown keys are
//! rejected. Every problem found is reported at once, before any computation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use chrono::NaiveTime;
use panelvar_core::simulate::{ErrorDist, SimConfig};
use panelvar_core::study::{StudyConfig, DEFAULT_TAUS};
use panelvar_core::ModelKind;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const KEYS: &[&str] = &[
    "data",
    "simulate",
    "forecasts",
    "models",
    "taus",
    "in_sample_taus",
    "window",
    "lambda",
    "lags",
    "weights",
    "statistical",
    "gmvar",
    "frontier",
    "frontier_points",
    "seed",
    "replications",
    "assets",
    "days",
    "intraday_steps",
    "jump_intensity",
    "dq_lags",
    "mc_reps",
    "level",
    "session_start",
    "session_end",
    "grid_seconds",
    "out_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Data(PathBuf),
    Simulate(ErrorDist),
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightsMode {
    Equal,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: Source,
    /// Previously written forecast CSV consumed by `backtest`.
    pub forecasts: Option<PathBuf>,
    pub models: Vec<ModelKind>,
    pub taus: Vec<f64>,
    pub in_sample_taus: Vec<f64>,
    pub window: usize,
    pub lambda: f64,
    pub lags: usize,
    pub weights: WeightsMode,
    pub statistical: bool,
    pub gmvar: bool,
    pub frontier: bool,
    pub frontier_points: usize,
    pub seed: u64,
    pub replications: usize,
    pub assets: usize,
    pub days: usize,
    pub intraday_steps: usize,
    pub jump_intensity: f64,
    pub dq_lags: usize,
    pub mc_reps: usize,
    pub level: f64,
    pub session_start: NaiveTime,
    pub session_end: NaiveTime,
    pub grid_seconds: u32,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let study = StudyConfig::default();
        let sim = SimConfig::default();
        Self {
            source: Source::Simulate(sim.error_dist),
            forecasts: None,
            models: study.models,
            taus: DEFAULT_TAUS.to_vec(),
            in_sample_taus: DEFAULT_TAUS.to_vec(),
            window: study.window,
            lambda: study.lambda,
            lags: study.lag_count,
            weights: WeightsMode::Equal,
            statistical: true,
            gmvar: true,
            frontier: true,
            frontier_points: 20,
            seed: sim.seed,
            replications: study.replications,
            assets: sim.n_assets,
            days: sim.days,
            intraday_steps: sim.intraday_steps,
            jump_intensity: sim.jump_intensity,
            dq_lags: study.dq_lags,
            mc_reps: study.mc_reps,
            level: study.level,
            session_start: sim.session().start,
            session_end: sim.session().end,
            grid_seconds: sim.grid_seconds(),
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Parses the flat key-value grammar into raw settings.
pub fn parse_settings(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            problems.push(format!("line {}: expected `key = value`", i + 1));
            continue;
        };
        let key = key.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            problems.push(format!("line {}: unknown key `{key}`", i + 1));
        } else if out.insert(key.clone(), value.trim().to_string()).is_some() {
            problems.push(format!("line {}: duplicate key `{key}`", i + 1));
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(CliError::Config(problems))
    }
}

/// Overlays `flags` on `file`. A flag selecting a data source also removes
/// the other source from the file settings.
pub fn merge(mut file: BTreeMap<String, String>, flags: BTreeMap<String, String>) -> BTreeMap<String, String> {
    if flags.contains_key("data") {
        file.remove("simulate");
    }
    if flags.contains_key("simulate") {
        file.remove("data");
    }
    file.extend(flags);
    file
}

fn list<T>(value: &str, parse: impl Fn(&str) -> Option<T>) -> Option<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse).collect()
}

fn parse_bool(value: &str) -> Option<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    /// Resolves raw settings on top of the defaults and validates the result.
    pub fn from_settings(settings: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut problems = Vec::new();

        macro_rules! scalar {
            ($key:literal, $field:ident) => {
                if let Some(v) = settings.get($key) {
                    match v.parse() {
                        Ok(x) => cfg.$field = x,
                        Err(_) => problems.push(format!("{}: cannot parse `{v}`", $key)),
                    }
                }
            };
        }
        macro_rules! flag {
            ($key:literal, $field:ident) => {
                if let Some(v) = settings.get($key) {
                    match parse_bool(v) {
                        Some(x) => cfg.$field = x,
                        None => problems.push(format!("{}: expected true or false, got `{v}`", $key)),
                    }
                }
            };
        }
        macro_rules! time {
            ($key:literal, $field:ident) => {
                if let Some(v) = settings.get($key) {
                    match NaiveTime::parse_from_str(v, "%H:%M:%S").or_else(|_| NaiveTime::parse_from_str(v, "%H:%M")) {
                        Ok(x) => cfg.$field = x,
                        Err(_) => problems.push(format!("{}: expected HH:MM[:SS], got `{v}`", $key)),
                    }
                }
            };
        }

        match (settings.get("data"), settings.get("simulate")) {
            (Some(_), Some(_)) => problems.push("data and simulate are mutually exclusive".into()),
            (Some(path), None) => cfg.source = Source::Data(PathBuf::from(path)),
            (None, Some(dist)) => match dist.parse() {
                Ok(d) => cfg.source = Source::Simulate(d),
                Err(e) => problems.push(format!("simulate: {e}")),
            },
            (None, None) => {}
        }
        cfg.forecasts = settings.get("forecasts").map(PathBuf::from);
        if let Some(v) = settings.get("models") {
            match list(v, |s| s.parse::<ModelKind>().ok()) {
                Some(m) => cfg.models = m,
                None => problems.push(format!("models: unknown model in `{v}`")),
            }
        }
        for (key, field) in [("taus", &mut cfg.taus), ("in_sample_taus", &mut cfg.in_sample_taus)] {
            if let Some(v) = settings.get(key) {
                match list(v, |s| s.parse::<f64>().ok()) {
                    Some(t) => *field = t,
                    None => problems.push(format!("{key}: cannot parse `{v}`")),
                }
            }
        }
        if settings.contains_key("taus") && !settings.contains_key("in_sample_taus") {
            cfg.in_sample_taus = cfg.taus.clone();
        }
        if let Some(v) = settings.get("weights") {
            cfg.weights = if v == "equal" { WeightsMode::Equal } else { WeightsMode::File(PathBuf::from(v)) };
        }
        if let Some(v) = settings.get("out_dir") {
            cfg.out_dir = PathBuf::from(v);
        }
        scalar!("window", window);
        scalar!("lambda", lambda);
        scalar!("lags", lags);
        scalar!("frontier_points", frontier_points);
        scalar!("seed", seed);
        scalar!("replications", replications);
        scalar!("assets", assets);
        scalar!("days", days);
        scalar!("intraday_steps", intraday_steps);
        scalar!("jump_intensity", jump_intensity);
        scalar!("dq_lags", dq_lags);
        scalar!("mc_reps", mc_reps);
        scalar!("level", level);
        scalar!("grid_seconds", grid_seconds);
        flag!("statistical", statistical);
        flag!("gmvar", gmvar);
        flag!("frontier", frontier);
        time!("session_start", session_start);
        time!("session_end", session_end);

        for p in cfg.problems() {
            if !problems.contains(&p) {
                problems.push(p);
            }
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(problems))
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for t in self.taus.iter().chain(&self.in_sample_taus) {
            if !(*t > 0.0 && *t < 1.0) {
                p.push(format!("tau {t} is outside (0,1)"));
            }
        }
        if self.window == 0 {
            p.push("window must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            p.push(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if self.lags == 0 {
            p.push("lags must be at least 1".into());
        }
        if self.replications == 0 {
            p.push("replications must be at least 1".into());
        }
        if self.mc_reps == 0 {
            p.push("mc_reps must be at least 1".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            p.push(format!("level must lie in (0,1), got {}", self.level));
        }
        if self.frontier_points < 2 {
            p.push("frontier_points must be at least 2".into());
        }
        if self.session_end <= self.session_start {
            p.push("session_end must be after session_start".into());
        }
        if let Source::Simulate(_) = self.source {
            if let Err(e) = self.sim_config().validate() {
                p.push(e.to_string());
            }
        }
        p
    }

    pub fn sim_config(&self) -> SimConfig {
        let dist = match self.source {
            Source::Simulate(d) => d,
            Source::Data(_) => SimConfig::default().error_dist,
        };
        SimConfig {
            error_dist: dist,
            n_assets: self.assets,
            days: self.days,
            intraday_steps: self.intraday_steps,
            jump_intensity: self.jump_intensity,
            seed: self.seed,
            ..SimConfig::default()
        }
    }

    pub fn study_config(&self) -> StudyConfig {
        StudyConfig {
            sim: self.sim_config(),
            replications: self.replications,
            models: self.models.clone(),
            in_sample_taus: self.in_sample_taus.clone(),
            taus: self.taus.clone(),
            window: self.window,
            lambda: self.lambda,
            lag_count: self.lags,
            dq_lags: self.dq_lags,
            mc_reps: self.mc_reps,
            level: self.level,
            out_of_sample: self.statistical || self.gmvar,
            gmvar: self.gmvar,
        }
    }

    /// Every resolved setting except the output directory, one `key=value` per line.
    pub fn canonical(&self) -> String {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        match &self.source {
            Source::Data(p) => writeln!(s, "data={}", p.display()),
            Source::Simulate(d) => writeln!(s, "simulate={d}"),
        }
        .unwrap();
        if let Some(f) = &self.forecasts {
            writeln!(s, "forecasts={}", f.display()).unwrap();
        }
        let models: Vec<&str> = self.models.iter().map(|m| m.name()).collect();
        let weights = match &self.weights {
            WeightsMode::Equal => "equal".to_string(),
            WeightsMode::File(p) => p.display().to_string(),
        };
        for (k, v) in [
            ("models", models.join(",")),
            ("taus", join(&self.taus)),
            ("in_sample_taus", join(&self.in_sample_taus)),
            ("window", self.window.to_string()),
            ("lambda", self.lambda.to_string()),
            ("lags", self.lags.to_string()),
            ("weights", weights),
            ("statistical", self.statistical.to_string()),
            ("gmvar", self.gmvar.to_string()),
            ("frontier", self.frontier.to_string()),
            ("frontier_points", self.frontier_points.to_string()),
            ("seed", self.seed.to_string()),
            ("replications", self.replications.to_string()),
            ("assets", self.assets.to_string()),
            ("days", self.days.to_string()),
            ("intraday_steps", self.intraday_steps.to_string()),
            ("jump_intensity", self.jump_intensity.to_string()),
            ("dq_lags", self.dq_lags.to_string()),
            ("mc_reps", self.mc_reps.to_string()),
            ("level", self.level.to_string()),
            ("session_start", self.session_start.to_string()),
            ("session_end", self.session_end.to_string()),
            ("grid_seconds", self.grid_seconds.to_string()),
        ] {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn grammar() {
        let s = parse_settings("# comment\n\nwindow = 250\ntaus=0.05, 0.95\n").unwrap();
        assert_eq!(s["window"], "250");
        assert_eq!(s["taus"], "0.05, 0.95");
        let Err(CliError::Config(p)) = parse_settings("bogus = 1\nnoequals\nwindow=1\nwindow=2") else { panic!() };
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn flags_win() {
        let file = settings(&[("window", "100"), ("data", "x.csv"), ("seed", "3")]);
        let flags = settings(&[("window", "200"), ("simulate", "mt9")]);
        let cfg = RunConfig::from_settings(&merge(file, flags)).unwrap();
        assert_eq!(cfg.window, 200);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.source, Source::Simulate(ErrorDist::Mt9));
    }

    #[test]
    fn all_problems_reported() {
        let s = settings(&[("taus", "0.5,1.5"), ("window", "abc"), ("level", "2"), ("models", "nope")]);
        let Err(CliError::Config(p)) = RunConfig::from_settings(&s) else { panic!() };
        assert_eq!(p.len(), 4, "{p:?}");
    }

    #[test]
    fn taus_flow_into_in_sample_taus() {
        let cfg = RunConfig::from_settings(&settings(&[("taus", "0.1")])).unwrap();
        assert_eq!(cfg.in_sample_taus, vec![0.1]);
    }

    #[test]
    fn hash_ignores_out_dir() {
        let a = RunConfig::from_settings(&settings(&[("out_dir", "a")])).unwrap();
        let b = RunConfig::from_settings(&settings(&[("out_dir", "b")])).unwrap();
        let c = RunConfig::from_settings(&settings(&[("seed", "1")])).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
