//! Realized measures built from intraday log-returns: realized variance,
//! semivariances, bipower variation, jump variation and realized covariance.

use std::f64::consts::FRAC_2_PI;
use std::io::Write;

use chrono::NaiveDate;
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::market_data::IntradayPanel;

/// Per-asset realized measures for one day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssetMeasures {
    pub rv: f64,
    pub rs_plus: f64,
    pub rs_minus: f64,
    pub bpv: f64,
    pub jv: f64,
}

impl AssetMeasures {
    pub fn from_returns(returns: &[f64]) -> Result<Self> {
        let rv = realized_variance(returns);
        let (rs_plus, rs_minus) = realized_semivariances(returns);
        let bpv = bipower_variation(returns)?;
        Ok(Self { rv, rs_plus, rs_minus, bpv, jv: jump_variation(rv, bpv) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealizedDay {
    pub date: NaiveDate,
    pub assets: Vec<AssetMeasures>,
    pub cov: DMatrix<f64>,
}

pub fn realized_variance(returns: &[f64]) -> f64 {
    returns.iter().map(|r| r * r).sum()
}

/// `(RS+, RS-)`; zero returns enter neither sum.
pub fn realized_semivariances(returns: &[f64]) -> (f64, f64) {
    returns.iter().fold((0.0, 0.0), |(p, m), &r| {
        if r > 0.0 {
            (p + r * r, m)
        } else if r < 0.0 {
            (p, m + r * r)
        } else {
            (p, m)
        }
    })
}

/// Skip-one bipower variation, `μ₁⁻² · N/(N−2) · Σ_{k≥3} |r_{k−2}||r_k|`.
pub fn bipower_variation(returns: &[f64]) -> Result<f64> {
    let n = returns.len();
    if n < 3 {
        return Err(Error::InsufficientObservations { needed: 3, got: n });
    }
    let sum: f64 = returns.iter().zip(&returns[2..]).map(|(a, b)| a.abs() * b.abs()).sum();
    // μ₁² = 2/π
    Ok(sum / FRAC_2_PI * n as f64 / (n - 2) as f64)
}

/// `max(rv − bpv, 0)`.
pub fn jump_variation(rv: f64, bpv: f64) -> f64 {
    (rv - bpv).max(0.0)
}

/// `Σ_k Δ_k p Δ_k p'` over assets sharing one grid.
pub fn realized_covariance(returns: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = returns.len();
    let len = returns.first().map_or(0, Vec::len);
    for (i, r) in returns.iter().enumerate() {
        if r.len() != len {
            return Err(Error::GridMismatch { asset: i, expected: len, got: r.len() });
        }
    }
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let c: f64 = returns[i].iter().zip(&returns[j]).map(|(a, b)| a * b).sum();
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    Ok(cov)
}

/// `diag(Σ)^{-1/2} Σ diag(Σ)^{-1/2}` with the diagonal set to exactly one.
pub fn correlation_from_covariance(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::invalid("covariance must be square"));
    }
    let mut sd = Vec::with_capacity(n);
    for i in 0..n {
        let v = cov[(i, i)];
        if !(v > 0.0) {
            return Err(Error::DegenerateVariance { asset: i });
        }
        sd.push(v.sqrt());
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            (cov[(i, j)] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
        }
    }))
}

/// All measures for every day in the panel.
pub fn compute_measures(panel: &IntradayPanel) -> Result<Vec<RealizedDay>> {
    (0..panel.n_days())
        .map(|d| {
            let rets = panel.day_returns(d);
            let assets = rets.iter().map(|r| AssetMeasures::from_returns(r)).collect::<Result<Vec<_>>>()?;
            let mut cov = realized_covariance(&rets)?;
            // keep diag(cov) identical to rv bit for bit
            for (i, m) in assets.iter().enumerate() {
                cov[(i, i)] = m.rv;
            }
            Ok(RealizedDay { date: panel.days()[d], assets, cov })
        })
        .collect()
}

/// `date,asset,rv,rs_plus,rs_minus,bpv,jv`
pub fn write_measures_csv<W: Write>(days: &[RealizedDay], assets: &[String], mut w: W) -> Result<()> {
    writeln!(w, "date,asset,rv,rs_plus,rs_minus,bpv,jv")?;
    for d in days {
        for (m, name) in d.assets.iter().zip(assets) {
            writeln!(w, "{},{},{},{},{},{},{}", d.date, name, m.rv, m.rs_plus, m.rs_minus, m.bpv, m.jv)?;
        }
    }
    Ok(())
}

/// `date,asset_i,asset_j,value`, lower triangle including the diagonal.
pub fn write_covariance_csv<W: Write>(days: &[RealizedDay], assets: &[String], mut w: W) -> Result<()> {
    writeln!(w, "date,asset_i,asset_j,value")?;
    for d in days {
        for i in 0..assets.len() {
            for j in 0..=i {
                writeln!(w, "{},{},{},{}", d.date, assets[i], assets[j], d.cov[(i, j)])?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn small_vector_measures() {
        let r = [0.01, -0.02, 0.01];
        assert!((realized_variance(&r) - 0.0006).abs() < 1e-18);
        let (p, m) = realized_semivariances(&r);
        assert!((p - 0.0002).abs() < 1e-18);
        assert!((m - 0.0004).abs() < 1e-18);
        assert_eq!(realized_variance(&[0.0; 5]), 0.0);
        assert_eq!(realized_semivariances(&[0.3, -0.3]), (0.09, 0.09));
        assert_eq!(realized_semivariances(&[0.0, 0.0]), (0.0, 0.0));
    }

    #[test]
    fn bipower_closed_forms() {
        let c = 0.003;
        let n = 50;
        let bpv = bipower_variation(&vec![c; n]).unwrap();
        let want = PI / 2.0 * n as f64 * c * c;
        assert!((bpv - want).abs() < 1e-12 * want);

        let mut spike = vec![0.0; 20];
        spike[7] = 0.5;
        assert_eq!(bipower_variation(&spike).unwrap(), 0.0);

        assert!(matches!(
            bipower_variation(&[0.1, 0.2]),
            Err(Error::InsufficientObservations { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn jump_variation_truncates() {
        assert!((jump_variation(0.0006, 0.0004) - 0.0002).abs() < 1e-18);
        assert_eq!(jump_variation(0.0004, 0.0006), 0.0);
    }

    #[test]
    fn covariance_structure() {
        let a = vec![0.01, -0.02, 0.005, 0.0];
        let cov = realized_covariance(&[a.clone(), a.clone()]).unwrap();
        let rv = realized_variance(&a);
        assert!(cov.iter().all(|c| (c - rv).abs() < 1e-18));

        let x = vec![0.01, 0.0, -0.03, 0.0];
        let y = vec![0.0, 0.02, 0.0, 0.01];
        let cov = realized_covariance(&[x, y]).unwrap();
        assert_eq!(cov[(0, 1)], 0.0);
        assert_eq!(cov[(1, 0)], 0.0);

        assert!(matches!(
            realized_covariance(&[vec![0.1; 3], vec![0.1; 4]]),
            Err(Error::GridMismatch { asset: 1, .. })
        ));
    }

    #[test]
    fn correlation_cases() {
        let cov = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 4.0]);
        let c = correlation_from_covariance(&cov).unwrap();
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]));

        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.3, 2.0, 5.0]));
        assert_eq!(correlation_from_covariance(&d).unwrap(), DMatrix::identity(3, 3));

        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(correlation_from_covariance(&bad), Err(Error::DegenerateVariance { asset: 1 })));
    }
}
