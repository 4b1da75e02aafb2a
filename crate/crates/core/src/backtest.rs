//! VaR backtesting: hit sequences, dynamic-quantile (DQ) likelihood-ratio
//! test with Monte-Carlo p-values, tick loss and Diebold-Mariano comparison.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::var::VaRForecastSeries;

pub const DEFAULT_DQ_LAGS: usize = 4;
pub const DEFAULT_MC_REPS: usize = 9999;

const NEWTON_MAX_ITER: usize = 100;
const DECREMENT_TOL: f64 = 1e-12;
const RIDGE: f64 = 1e-8;
const SEPARATION_PENALTY: f64 = 1.0;
const SEPARATION_COEF: f64 = 30.0;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Alignment(format!("{a} returns vs {b} forecasts")));
    }
    if a == 0 {
        return Err(Error::InsufficientObservations { needed: 1, got: 0 });
    }
    Ok(())
}

/// `r_t ≤ Q_t`
pub fn hits(returns: &[f64], forecasts: &[f64]) -> Result<Vec<bool>> {
    check_len(returns.len(), forecasts.len())?;
    Ok(returns.iter().zip(forecasts).map(|(r, q)| r <= q).collect())
}

pub fn hit_rate(hits: &[bool]) -> f64 {
    hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64
}

pub fn tick_losses(returns: &[f64], forecasts: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_len(returns.len(), forecasts.len())?;
    Ok(returns.iter().zip(forecasts).map(|(r, q)| crate::qreg::quantile_loss(r - q, tau)).collect())
}

pub fn tick_loss(returns: &[f64], forecasts: &[f64], tau: f64) -> Result<f64> {
    let l = tick_losses(returns, forecasts, tau)?;
    Ok(l.iter().sum::<f64>() / l.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DqResult {
    pub statistic: f64,
    pub p_value: f64,
    pub lags: usize,
    pub mc_reps: usize,
    /// The unrestricted logit separated the hits; a penalized fit was used.
    pub separation: bool,
    pub observations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Logit {
    loglik: f64,
    separation: bool,
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Row-major design matrix of the DQ logit.
struct Design {
    data: Vec<f64>,
    cols: usize,
}

impl Design {
    fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn loglik(x: &Design, y: &[f64], beta: &[f64]) -> f64 {
    x.rows()
        .zip(y)
        .map(|(row, h)| {
            let e = dot(row, beta);
            if *h > 0.5 {
                log_sigmoid(e)
            } else {
                log_sigmoid(-e)
            }
        })
        .sum()
}

/// Newton-Raphson maximizing `ℓ(β) − κ/2 ‖β − β₀‖²` with step halving.
/// Returns the estimate and whether the Newton decrement fell below tolerance.
fn newton(x: &Design, y: &[f64], start: &[f64], kappa: f64) -> Option<(Vec<f64>, bool)> {
    let k = x.cols;
    let penalty = |b: &[f64]| 0.5 * kappa * b.iter().zip(start).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
    let objective = |b: &[f64]| loglik(x, y, b) - penalty(b);
    let mut beta = start.to_vec();
    let mut current = objective(&beta);
    let mut grad = DVector::zeros(k);
    let mut hess = DMatrix::zeros(k, k);
    let mut trial = vec![0.0; k];
    for _ in 0..NEWTON_MAX_ITER {
        grad.fill(0.0);
        hess.fill(0.0);
        for (row, h) in x.rows().zip(y) {
            let p = 1.0 / (1.0 + (-dot(row, &beta)).exp());
            let w = (p * (1.0 - p)).max(1e-300);
            let r = h - p;
            for a in 0..k {
                grad[a] += row[a] * r;
                let wa = w * row[a];
                for b in a..k {
                    hess[(a, b)] += wa * row[b];
                }
            }
        }
        for a in 0..k {
            grad[a] -= kappa * (beta[a] - start[a]);
            hess[(a, a)] += kappa;
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        let step = hess.clone().cholesky()?.solve(&grad);
        if step.dot(&grad) < DECREMENT_TOL {
            return Some((beta, true));
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            for j in 0..k {
                trial[j] = beta[j] + alpha * step[j];
            }
            let val = objective(&trial);
            if val >= current {
                beta.copy_from_slice(&trial);
                current = val;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Some((beta, true));
        }
    }
    Some((beta, false))
}

fn fit_logit(x: &Design, y: &[f64], tau: f64) -> Logit {
    let mut start = vec![0.0; x.cols];
    start[0] = (tau / (1.0 - tau)).ln();
    let all_same = y.iter().all(|h| *h > 0.5) || y.iter().all(|h| *h <= 0.5);
    if !all_same {
        if let Some((beta, converged)) = newton(x, y, &start, RIDGE) {
            if converged && beta.iter().all(|b| b.abs() < SEPARATION_COEF) {
                return Logit { loglik: loglik(x, y, &beta), separation: false };
            }
        }
    }
    match newton(x, y, &start, SEPARATION_PENALTY) {
        Some((beta, _)) => Logit { loglik: loglik(x, y, &beta), separation: true },
        None => Logit { loglik: loglik(x, y, &start), separation: true },
    }
}

/// Design columns `[1, hit_{t−1..t−L}, Q_t..Q_{t−L+1}]` for `t = L..T`, with
/// forecast columns standardized and constant columns removed.
fn dq_design(hit: &[f64], q_std: &[f64], lags: usize) -> Design {
    let n = hit.len() - lags;
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    for l in 1..=lags {
        cols.push((lags..hit.len()).map(|t| hit[t - l]).collect());
    }
    for l in 0..lags {
        cols.push((lags..hit.len()).map(|t| q_std[t - l]).collect());
    }
    let keep: Vec<Vec<f64>> = cols
        .into_iter()
        .enumerate()
        .filter(|(j, c)| *j == 0 || c.iter().any(|v| (v - c[0]).abs() > 1e-12))
        .map(|(_, c)| c)
        .collect();
    let cols = keep.len();
    Design { data: (0..n).flat_map(|i| keep.iter().map(move |c| c[i])).collect(), cols }
}

fn lr_statistic(hit: &[f64], q_std: &[f64], lags: usize, tau: f64) -> (f64, bool) {
    let x = dq_design(hit, q_std, lags);
    let y = &hit[lags..];
    let fit = fit_logit(&x, y, tau);
    let (lt, l1t) = (tau.ln(), (1.0 - tau).ln());
    let restricted: f64 = y.iter().map(|h| if *h > 0.5 { lt } else { l1t }).sum();
    ((2.0 * (fit.loglik - restricted)).max(0.0), fit.separation)
}

/// DQ test of `H₀: hits are iid Bernoulli(τ)`. The p-value is the share
/// of `mc_reps` simulated null statistics at least as large as the
/// observed one; the simulations keep the observed forecast path.
pub fn dq_test(hits: &[bool], forecasts: &[f64], tau: f64, lags: usize, mc_reps: usize, seed: u64) -> Result<DqResult> {
    check_len(hits.len(), forecasts.len())?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0,1), got {tau}")));
    }
    if mc_reps == 0 {
        return Err(Error::invalid("DQ test needs at least one Monte-Carlo replication"));
    }
    let needed = 2 * lags + 2 + 10;
    if hits.len() < needed {
        return Err(Error::InsufficientObservations { needed, got: hits.len() });
    }
    let n = forecasts.len() as f64;
    let mean = forecasts.iter().sum::<f64>() / n;
    let sd = (forecasts.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / n).sqrt();
    let q_std: Vec<f64> = if sd > 0.0 { forecasts.iter().map(|q| (q - mean) / sd).collect() } else { vec![0.0; forecasts.len()] };

    let h: Vec<f64> = hits.iter().map(|b| f64::from(u8::from(*b))).collect();
    let (statistic, separation) = lr_statistic(&h, &q_std, lags, tau);
    let exceed = (0..mc_reps)
        .into_par_iter()
        .filter(|&b| {
            let mut rng = stream(seed, b as u64);
            let sim: Vec<f64> = (0..h.len()).map(|_| f64::from(u8::from(rng.random::<f64>() < tau))).collect();
            lr_statistic(&sim, &q_std, lags, tau).0 >= statistic
        })
        .count();
    Ok(DqResult {
        statistic,
        p_value: exceed as f64 / mc_reps as f64,
        lags,
        mc_reps,
        separation,
        observations: hits.len() - lags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmFlag {
    IdenticalForecasts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmResult {
    /// Negative when model A has the smaller average loss.
    pub statistic: f64,
    pub p_value: f64,
    pub mean_difference: f64,
    pub flag: Option<DmFlag>,
}

/// Diebold-Mariano test on `d_t = loss_a,t − loss_b,t` with a two-sided
/// normal p-value.
pub fn dm_test(loss_a: &[f64], loss_b: &[f64]) -> Result<DmResult> {
    if loss_a.len() != loss_b.len() {
        return Err(Error::Alignment(format!("{} vs {} losses", loss_a.len(), loss_b.len())));
    }
    if loss_a.len() < 2 {
        return Err(Error::InsufficientObservations { needed: 2, got: loss_a.len() });
    }
    let d: Vec<f64> = loss_a.iter().zip(loss_b).map(|(a, b)| a - b).collect();
    let t = d.len() as f64;
    let mean = d.iter().sum::<f64>() / t;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t;
    if var == 0.0 {
        return Ok(DmResult { statistic: 0.0, p_value: 1.0, mean_difference: mean, flag: Some(DmFlag::IdenticalForecasts) });
    }
    let statistic = mean / (var / t).sqrt();
    let p_value = 2.0 * Normal::standard().sf(statistic.abs());
    Ok(DmResult { statistic, p_value, mean_difference: mean, flag: None })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestConfig {
    pub lags: usize,
    pub mc_reps: usize,
    pub seed: u64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self { lags: DEFAULT_DQ_LAGS, mc_reps: DEFAULT_MC_REPS, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub model: String,
    pub tau: f64,
    pub observations: usize,
    pub hit_rate: f64,
    pub tick_loss: f64,
    pub dq: DqResult,
}

pub fn backtest_series(series: &VaRForecastSeries, cfg: &BacktestConfig) -> Result<BacktestReport> {
    let r = series.realized();
    let q = series.forecasts();
    let h = hits(&r, &q)?;
    Ok(BacktestReport {
        model: series.model.to_string(),
        tau: series.tau,
        observations: h.len(),
        hit_rate: hit_rate(&h),
        tick_loss: tick_loss(&r, &q, series.tau)?,
        dq: dq_test(&h, &q, series.tau, cfg.lags, cfg.mc_reps, cfg.seed)?,
    })
}

/// `model,tau,observations,hit_rate,tick_loss,dq_statistic,dq_p_value,dq_separation`
pub fn write_backtest_csv<W: Write>(reports: &[BacktestReport], mut w: W) -> Result<()> {
    writeln!(w, "model,tau,observations,hit_rate,tick_loss,dq_statistic,dq_p_value,dq_separation")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.model, r.tau, r.observations, r.hit_rate, r.tick_loss, r.dq.statistic, r.dq.p_value, r.dq.separation
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmComparison {
    pub tau: f64,
    pub model_a: String,
    pub model_b: String,
    pub result: DmResult,
}

/// Pairwise DM tests between every two series sharing a `τ`.
pub fn dm_comparisons(series: &[VaRForecastSeries]) -> Result<Vec<DmComparison>> {
    let mut out = Vec::new();
    for (i, a) in series.iter().enumerate() {
        for b in &series[i + 1..] {
            if a.tau != b.tau {
                continue;
            }
            let la = tick_losses(&a.realized(), &a.forecasts(), a.tau)?;
            let lb = tick_losses(&b.realized(), &b.forecasts(), b.tau)?;
            out.push(DmComparison {
                tau: a.tau,
                model_a: a.model.to_string(),
                model_b: b.model.to_string(),
                result: dm_test(&la, &lb)?,
            });
        }
    }
    Ok(out)
}

/// `tau,model_a,model_b,statistic,p_value,flag`
pub fn write_dm_csv<W: Write>(rows: &[DmComparison], mut w: W) -> Result<()> {
    writeln!(w, "tau,model_a,model_b,statistic,p_value,flag")?;
    for r in rows {
        let flag = match r.result.flag {
            Some(DmFlag::IdenticalForecasts) => "IdenticalForecasts",
            None => "",
        };
        writeln!(w, "{},{},{},{},{},{}", r.tau, r.model_a, r.model_b, r.result.statistic, r.result.p_value, flag)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hit_examples() {
        let h = hits(&[-0.03, -0.01, 0.02, -0.05], &[-0.02; 4]).unwrap();
        assert_eq!(h, vec![true, false, false, true]);
        assert_eq!(hit_rate(&h), 0.5);
        // boundary counts as a hit
        assert_eq!(hits(&[-0.02], &[-0.02]).unwrap(), vec![true]);
        assert!(hits(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn tick_loss_examples() {
        assert!((tick_loss(&[-0.03], &[-0.02], 0.05).unwrap() - 0.0095).abs() < 1e-15);
        assert!((tick_loss(&[0.01], &[-0.02], 0.05).unwrap() - 0.0015).abs() < 1e-15);
    }

    #[test]
    fn dm_identical() {
        let l = vec![0.1, 0.2, 0.3];
        let r = dm_test(&l, &l).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.flag, Some(DmFlag::IdenticalForecasts));
    }

    #[test]
    fn dm_sign() {
        let a = vec![0.1, 0.12, 0.09, 0.11];
        let b = vec![0.2, 0.21, 0.19, 0.25];
        let r = dm_test(&a, &b).unwrap();
        assert!(r.statistic < 0.0);
        assert!(r.p_value < 0.05);
    }

    #[test]
    fn all_miss_sequence_is_handled() {
        let q: Vec<f64> = (0..200).map(|t| -0.02 - 0.001 * (t % 7) as f64).collect();
        let h = vec![false; 200];
        let r = dq_test(&h, &q, 0.05, 4, 50, 1).unwrap();
        assert!(r.separation);
        assert!(r.statistic.is_finite() && r.statistic > 0.0);
        assert!((0.0..=1.0).contains(&r.p_value));
    }

    #[test]
    fn lr_is_nonnegative_and_deterministic() {
        let mut rng = stream(3, 0);
        let q: Vec<f64> = (0..400).map(|_| -0.02 + 0.005 * rng.random::<f64>()).collect();
        let h: Vec<bool> = (0..400).map(|_| rng.random::<f64>() < 0.05).collect();
        let a = dq_test(&h, &q, 0.05, 4, 99, 9).unwrap();
        let b = dq_test(&h, &q, 0.05, 4, 99, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.statistic >= 0.0);
    }
}
