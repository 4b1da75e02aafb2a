//! Moving-block bootstrap over days. A sampled day brings every asset's row
//! for that day, preserving cross-sectional dependence.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use super::{fit, QuantileFit, QuantileProblem};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone)]
pub struct BootstrapSE {
    pub parameter_names: Vec<String>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub replications: usize,
    pub skipped: usize,
}

impl BootstrapSE {
    pub fn t_stats(&self) -> Vec<f64> {
        self.estimates.iter().zip(&self.std_errors).map(|(e, s)| e / s).collect()
    }
}

/// `⌈T^{1/3}⌉`
pub fn block_length(days: usize) -> usize {
    let mut l = (days as f64).cbrt().ceil() as usize;
    // guard against cbrt rounding just above an exact cube
    while l > 1 && (l - 1).pow(3) >= days {
        l -= 1;
    }
    l.max(1)
}

/// Day positions `0..days` resampled in contiguous blocks of `block`.
pub fn moving_block_days<R: Rng + ?Sized>(days: usize, block: usize, rng: &mut R) -> Vec<usize> {
    let block = block.clamp(1, days.max(1));
    let mut out = Vec::with_capacity(days + block);
    while out.len() < days {
        let start = rng.random_range(0..=days - block);
        out.extend(start..start + block);
    }
    out.truncate(days);
    out
}

fn rows_by_day(problem: &QuantileProblem) -> Vec<Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, &t) in problem.time_index().iter().enumerate() {
        map.entry(t).or_default().push(r);
    }
    map.into_values().collect()
}

/// Standard errors from explicit resamples, each a list of day positions
/// into the problem's sorted distinct days.
pub fn bootstrap_from_resamples(problem: &QuantileProblem, resamples: &[Vec<usize>]) -> Result<BootstrapSE> {
    let point = fit(problem)?;
    let days = rows_by_day(problem);
    let fits: Vec<Option<QuantileFit>> = resamples
        .par_iter()
        .map(|sample| {
            let rows: Vec<usize> = sample.iter().flat_map(|&d| days[d].iter().copied()).collect();
            fit(&problem.select_rows(&rows)).ok()
        })
        .collect();
    summarize(point, fits)
}

fn summarize(point: QuantileFit, fits: Vec<Option<QuantileFit>>) -> Result<BootstrapSE> {
    let requested = fits.len();
    let ok: Vec<Vec<f64>> = fits.into_iter().flatten().map(|f| f.parameters()).collect();
    let skipped = requested - ok.len();
    if requested < 2 || ok.len() < 2 || skipped * 5 > requested {
        return Err(Error::BootstrapDegenerate { skipped, requested });
    }
    let k = point.parameter_names.len();
    let b = ok.len() as f64;
    let std_errors = (0..k)
        .map(|j| {
            let mean = ok.iter().map(|p| p[j]).sum::<f64>() / b;
            (ok.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (b - 1.0)).sqrt()
        })
        .collect();
    Ok(BootstrapSE {
        parameter_names: point.parameter_names.clone(),
        estimates: point.parameters(),
        std_errors,
        replications: ok.len(),
        skipped,
    })
}

/// `B` moving-block replicates with block length `⌈T^{1/3}⌉`; replicate `b`
/// draws from RNG stream `b` of `seed`.
pub fn bootstrap_se(problem: &QuantileProblem, replications: usize, seed: u64) -> Result<BootstrapSE> {
    if replications < 2 {
        return Err(Error::invalid("bootstrap needs at least 2 replications"));
    }
    let n_days = rows_by_day(problem).len();
    let block = block_length(n_days);
    let resamples: Vec<Vec<usize>> = (0..replications)
        .map(|b| moving_block_days(n_days, block, &mut stream(seed, b as u64)))
        .collect();
    bootstrap_from_resamples(problem, &resamples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    #[test]
    fn block_lengths() {
        assert_eq!(block_length(1000), 10);
        assert_eq!(block_length(1001), 11);
        assert_eq!(block_length(2613), 14);
        assert_eq!(block_length(1), 1);
    }

    #[test]
    fn identical_resamples_give_zero_se() {
        let mut rng = stream(4, 0);
        let y: Vec<f64> = (0..40).map(|_| rng.sample(StandardNormal)).collect();
        let p = QuantileProblem::single(y, vec![], vec![], 0.5).unwrap();
        let sample: Vec<usize> = (0..40).collect();
        let se = bootstrap_from_resamples(&p, &[sample.clone(), sample]).unwrap();
        assert_eq!(se.std_errors, vec![0.0]);
        assert!(se.std_errors.iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn block_resample_covers_length() {
        let mut rng = stream(1, 1);
        let s = moving_block_days(103, 5, &mut rng);
        assert_eq!(s.len(), 103);
        assert!(s.iter().all(|&d| d < 103));
    }
}
