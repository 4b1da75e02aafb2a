//! Quantile regression: classical per-asset fits and the penalized
//! fixed-effects panel estimator
//!
//! ```text
//! min_{α, β} Σ_i Σ_t ρ_τ(y_it − α_i − v_it'β) + λ Σ_i |α_i|
//! ```
//!
//! with τ-specific fixed effects, solved as a linear program.

mod bootstrap;
mod lp;

use std::fmt;

use crate::error::{Error, Result};
use lp::SparseDesign;

pub use bootstrap::{block_length, bootstrap_from_resamples, bootstrap_se, moving_block_days, BootstrapSE};

/// Relative duality-gap tolerance of the interior point.
pub const GAP_TOLERANCE: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 200;
const MAX_POLISH_SWEEPS: usize = 100;
const MAX_PIVOTS_PER_PARAMETER: usize = 20;

/// `u (τ − 1{u < 0})`
pub fn quantile_loss(u: f64, tau: f64) -> f64 {
    lp::check_loss(u, tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMode {
    /// Shared slopes, one intercept per asset.
    Panel,
    /// Intercept and slopes per asset.
    Univariate,
}

impl fmt::Display for FitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitMode::Panel => "panel",
            FitMode::Univariate => "univariate",
        })
    }
}

/// Stacked responses with their regressors and asset/day labels.
#[derive(Debug, Clone)]
pub struct QuantileProblem {
    responses: Vec<f64>,
    regressors: Vec<f64>,
    n_slopes: usize,
    slope_names: Vec<String>,
    asset_index: Vec<usize>,
    asset_names: Vec<String>,
    time_index: Vec<usize>,
    tau: f64,
    lambda: f64,
    mode: FitMode,
}

impl QuantileProblem {
    /// `regressors` is row-major with `slope_names.len()` columns. `time_index`
    /// labels each row's day and drives the block bootstrap.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        responses: Vec<f64>,
        regressors: Vec<f64>,
        slope_names: Vec<String>,
        asset_index: Vec<usize>,
        asset_names: Vec<String>,
        time_index: Vec<usize>,
        tau: f64,
        lambda: f64,
        mode: FitMode,
    ) -> Result<Self> {
        let m = responses.len();
        let p = slope_names.len();
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0,1), got {tau}")));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if regressors.len() != m * p || asset_index.len() != m || time_index.len() != m {
            return Err(Error::invalid("regressor, asset and time labels must align with responses"));
        }
        if asset_names.is_empty() || asset_index.iter().any(|&i| i >= asset_names.len()) {
            return Err(Error::invalid("asset index out of range"));
        }
        if responses.iter().chain(&regressors).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite value in responses or regressors"));
        }
        Ok(Self {
            responses,
            regressors,
            n_slopes: p,
            slope_names,
            asset_index,
            asset_names,
            time_index,
            tau,
            lambda,
            mode,
        })
    }

    /// Single-asset convenience constructor; rows are their own days.
    pub fn single(responses: Vec<f64>, regressors: Vec<f64>, slope_names: Vec<String>, tau: f64) -> Result<Self> {
        let m = responses.len();
        Self::new(
            responses,
            regressors,
            slope_names,
            vec![0; m],
            vec!["asset".into()],
            (0..m).collect(),
            tau,
            0.0,
            FitMode::Univariate,
        )
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0,1), got {tau}")));
        }
        Ok(Self { tau, ..self.clone() })
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(Self { lambda, ..self.clone() })
    }

    pub fn with_mode(&self, mode: FitMode) -> Self {
        Self { mode, ..self.clone() }
    }

    /// Responses multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self { responses: self.responses.iter().map(|y| y * c).collect(), ..self.clone() }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mode(&self) -> FitMode {
        self.mode
    }

    pub fn n_rows(&self) -> usize {
        self.responses.len()
    }

    pub fn n_slopes(&self) -> usize {
        self.n_slopes
    }

    pub fn n_assets(&self) -> usize {
        self.asset_names.len()
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn regressor_row(&self, row: usize) -> &[f64] {
        &self.regressors[row * self.n_slopes..(row + 1) * self.n_slopes]
    }

    pub fn asset_index(&self) -> &[usize] {
        &self.asset_index
    }

    pub fn asset_names(&self) -> &[String] {
        &self.asset_names
    }

    pub fn slope_names(&self) -> &[String] {
        &self.slope_names
    }

    pub fn time_index(&self) -> &[usize] {
        &self.time_index
    }

    /// Sub-problem made of the given rows, in order (duplicates allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let p = self.n_slopes;
        let mut regressors = Vec::with_capacity(rows.len() * p);
        for &r in rows {
            regressors.extend_from_slice(self.regressor_row(r));
        }
        Self {
            responses: rows.iter().map(|&r| self.responses[r]).collect(),
            regressors,
            n_slopes: p,
            slope_names: self.slope_names.clone(),
            asset_index: rows.iter().map(|&r| self.asset_index[r]).collect(),
            asset_names: self.asset_names.clone(),
            time_index: rows.iter().map(|&r| self.time_index[r]).collect(),
            tau: self.tau,
            lambda: self.lambda,
            mode: self.mode,
        }
    }

    /// Rows of one asset as a single-asset problem.
    fn asset_subproblem(&self, asset: usize) -> Self {
        let rows: Vec<usize> = (0..self.n_rows()).filter(|&r| self.asset_index[r] == asset).collect();
        let mut sub = self.select_rows(&rows);
        sub.asset_index = vec![0; rows.len()];
        sub.asset_names = vec![self.asset_names[asset].clone()];
        sub
    }

    /// Panel design: fixed-effect columns first, then slopes, then two
    /// penalty pseudo-rows per asset encoding `λ|α_i|`.
    fn panel_design(&self) -> (SparseDesign, Vec<f64>) {
        let n = self.n_assets();
        let x = SparseDesign::panel(n, self.n_slopes, &self.asset_index, &self.regressors, self.lambda);
        let mut y = self.responses.clone();
        if self.lambda > 0.0 {
            y.extend(std::iter::repeat_n(0.0, 2 * n));
        }
        (x, y)
    }

    /// Gram matrix of the unpenalized design.
    fn gram(&self) -> nalgebra::DMatrix<f64> {
        let n = self.n_assets();
        let p = self.n_slopes;
        let mut g = nalgebra::DMatrix::zeros(n + p, n + p);
        for (r, &a) in self.asset_index.iter().enumerate() {
            let v = self.regressor_row(r);
            g[(a, a)] += 1.0;
            for j in 0..p {
                g[(n + j, a)] += v[j];
                for l in 0..=j {
                    g[(n + j, n + l)] += v[j] * v[l];
                }
            }
        }
        g.fill_upper_triangle_with_lower_triangle();
        g
    }

    fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.asset_names.iter().map(|a| format!("alpha[{a}]")).collect();
        match self.mode {
            FitMode::Panel => names.extend(self.slope_names.iter().cloned()),
            FitMode::Univariate => {
                for a in &self.asset_names {
                    names.extend(self.slope_names.iter().map(|s| format!("{s}[{a}]")));
                }
            }
        }
        names
    }

    fn check_rank(&self) -> Result<()> {
        let n = self.n_assets();
        let p = self.n_slopes;
        let needed = match self.mode {
            FitMode::Panel => n + p + 1,
            FitMode::Univariate => p + 2,
        };
        if self.mode == FitMode::Panel && self.n_rows() < needed {
            return Err(Error::invalid(format!("need at least {needed} rows, got {}", self.n_rows())));
        }
        let names = self.parameter_names();
        match self.mode {
            FitMode::Panel => {
                first_dependent_column(&self.gram())
                    .map_or(Ok(()), |j| Err(Error::RankDeficient { column: names[j].clone() }))
            }
            FitMode::Univariate => {
                for a in 0..n {
                    let sub = self.asset_subproblem(a);
                    if sub.n_rows() < needed {
                        return Err(Error::invalid(format!(
                            "asset {} needs at least {needed} rows, got {}",
                            self.asset_names[a],
                            sub.n_rows()
                        )));
                    }
                    if let Some(j) = first_dependent_column(&sub.gram()) {
                        let column = if j == 0 { names[a].clone() } else { names[n + a * p + j - 1].clone() };
                        return Err(Error::RankDeficient { column });
                    }
                }
                Ok(())
            }
        }
    }
}

/// Incremental Cholesky on the Gram matrix; returns the first column whose
/// pivot collapses relative to its own norm.
fn first_dependent_column(gram: &nalgebra::DMatrix<f64>) -> Option<usize> {
    let k = gram.nrows();
    let mut l = nalgebra::DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        let mut d = gram[(j, j)];
        for c in 0..j {
            d -= l[(j, c)] * l[(j, c)];
        }
        if !(d > 1e-10 * gram[(j, j)]) || gram[(j, j)] <= 0.0 {
            return Some(j);
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..k {
            let mut s = gram[(i, j)];
            for c in 0..j {
                s -= l[(i, c)] * l[(j, c)];
            }
            l[(i, j)] = s / djj;
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub enum Slopes {
    Shared(Vec<f64>),
    PerAsset(Vec<Vec<f64>>),
}

impl Slopes {
    pub fn for_asset(&self, asset: usize) -> &[f64] {
        match self {
            Slopes::Shared(b) => b,
            Slopes::PerAsset(b) => &b[asset],
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuantileFit {
    pub tau: f64,
    pub lambda: f64,
    pub alphas: Vec<f64>,
    pub slopes: Slopes,
    /// Penalized loss at the returned parameters.
    pub objective: f64,
    pub iterations: usize,
    pub gap: f64,
    pub parameter_names: Vec<String>,
}

impl QuantileFit {
    /// Fixed effects followed by slopes, in `parameter_names` order.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = self.alphas.clone();
        match &self.slopes {
            Slopes::Shared(b) => out.extend_from_slice(b),
            Slopes::PerAsset(b) => b.iter().for_each(|bi| out.extend_from_slice(bi)),
        }
        out
    }

    /// Fitted conditional quantile for `asset` given its regressor vector.
    pub fn predict(&self, asset: usize, regressors: &[f64]) -> f64 {
        self.alphas[asset] + self.slopes.for_asset(asset).iter().zip(regressors).map(|(b, v)| b * v).sum::<f64>()
    }
}

/// Penalized loss at `(alphas, slopes)`.
pub fn objective(problem: &QuantileProblem, alphas: &[f64], slopes: &Slopes) -> f64 {
    let tau = problem.tau;
    let loss: f64 = (0..problem.n_rows())
        .map(|r| {
            let a = problem.asset_index[r];
            let fit = alphas[a]
                + slopes
                    .for_asset(a)
                    .iter()
                    .zip(problem.regressor_row(r))
                    .map(|(b, v)| b * v)
                    .sum::<f64>();
            quantile_loss(problem.responses[r] - fit, tau)
        })
        .sum();
    loss + problem.lambda * alphas.iter().map(|a| a.abs()).sum::<f64>()
}

struct RawFit {
    coef: Vec<f64>,
    iterations: usize,
    gap: f64,
}

fn zero_tolerance(y: &[f64]) -> f64 {
    1e-9 * y.iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

fn solve_panel(problem: &QuantileProblem, start: Option<Vec<f64>>) -> Result<RawFit> {
    let (x, y) = problem.panel_design();
    let tol = zero_tolerance(&y);
    let pivots = MAX_PIVOTS_PER_PARAMETER * x.ncols + 50;
    if let Some(coef) = start.and_then(|c| lp::simplex(&x, &y, problem.tau, &c, tol, pivots)) {
        return Ok(RawFit { coef, iterations: 0, gap: 0.0 });
    }
    let sol = lp::interior_point(&x, &y, problem.tau, GAP_TOLERANCE, MAX_ITERATIONS)?;
    if let Some(coef) = lp::simplex(&x, &y, problem.tau, &sol.coef, tol, pivots) {
        return Ok(RawFit { coef, iterations: sol.iterations, gap: sol.gap });
    }
    let mut coef = sol.coef;
    lp::polish(&x, &y, problem.tau, &mut coef, MAX_POLISH_SWEEPS);
    Ok(RawFit { coef, iterations: sol.iterations, gap: sol.gap })
}

/// Solves the problem for its `τ` and `λ`.
pub fn fit(problem: &QuantileProblem) -> Result<QuantileFit> {
    fit_from(problem, None)
}

/// Like [`fit`], but first runs simplex pivots from the vertex nearest to
/// `start`, typically the previous window's fit in a rolling estimation.
/// Falls back to the interior point when no certified optimum is reached.
pub fn fit_warm(problem: &QuantileProblem, start: &QuantileFit) -> Result<QuantileFit> {
    fit_from(problem, Some(start))
}

fn fit_from(problem: &QuantileProblem, start: Option<&QuantileFit>) -> Result<QuantileFit> {
    problem.check_rank()?;
    let n = problem.n_assets();
    let p = problem.n_slopes;
    let start = start.filter(|s| s.alphas.len() == n && s.parameters().len() == problem.parameter_names().len());
    let (alphas, slopes, iterations, gap) = match problem.mode {
        FitMode::Panel => {
            let raw = solve_panel(problem, start.map(|s| s.parameters()))?;
            (raw.coef[..n].to_vec(), Slopes::Shared(raw.coef[n..].to_vec()), raw.iterations, raw.gap)
        }
        FitMode::Univariate => {
            let mut alphas = Vec::with_capacity(n);
            let mut per = Vec::with_capacity(n);
            let (mut its, mut gap) = (0, 0.0);
            for a in 0..n {
                let init = start.map(|s| {
                    let mut c = vec![s.alphas[a]];
                    c.extend_from_slice(s.slopes.for_asset(a));
                    c
                });
                let raw = solve_panel(&problem.asset_subproblem(a), init)?;
                alphas.push(raw.coef[0]);
                per.push(raw.coef[1..1 + p].to_vec());
                its = its.max(raw.iterations);
                gap += raw.gap;
            }
            (alphas, Slopes::PerAsset(per), its, gap)
        }
    };
    let objective = objective(problem, &alphas, &slopes);
    Ok(QuantileFit {
        tau: problem.tau,
        lambda: problem.lambda,
        alphas,
        slopes,
        objective,
        iterations,
        gap,
        parameter_names: problem.parameter_names(),
    })
}

/// Smallest one-sided directional derivative of the penalized objective over
/// all signed coordinate directions at the fit. Non-negative at an optimum.
pub fn min_directional_derivative(problem: &QuantileProblem, fit: &QuantileFit) -> f64 {
    let zero_tol = zero_tolerance(&problem.responses);
    match problem.mode {
        FitMode::Panel => {
            let (x, y) = problem.panel_design();
            lp::min_directional_derivative(&x, &y, problem.tau, &fit.parameters(), zero_tol)
        }
        FitMode::Univariate => (0..problem.n_assets())
            .map(|a| {
                let (x, y) = problem.asset_subproblem(a).panel_design();
                let mut coef = vec![fit.alphas[a]];
                coef.extend_from_slice(fit.slopes.for_asset(a));
                lp::min_directional_derivative(&x, &y, problem.tau, &coef, zero_tol)
            })
            .fold(f64::INFINITY, f64::min),
    }
}
