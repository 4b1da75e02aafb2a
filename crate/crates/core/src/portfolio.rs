//! Portfolio construction on the VaR-implied covariance
//! `Ξ = diag(|VaR|) Ω diag(|VaR|)`: global minimum-VaR weights and the
//! long-only mean-VaR frontier.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const TRADING_DAYS: f64 = 252.0;
pub const MAX_CONDITION: f64 = 1e12;
pub const KKT_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct VaRCovariance {
    pub xi: DMatrix<f64>,
    /// Assets whose VaR forecast is zero, leaving a zero row and column.
    pub degenerate_assets: Vec<usize>,
}

pub fn build_xi(asset_vars: &[f64], omega: &DMatrix<f64>) -> Result<VaRCovariance> {
    let n = asset_vars.len();
    if omega.nrows() != n || omega.ncols() != n {
        return Err(Error::invalid(format!("{n} VaRs for a {}x{} correlation", omega.nrows(), omega.ncols())));
    }
    let a: Vec<f64> = asset_vars.iter().map(|v| v.abs()).collect();
    let xi = DMatrix::from_fn(n, n, |i, j| a[i] * omega[(i, j)] * a[j]);
    let degenerate_assets = (0..n).filter(|&i| a[i] == 0.0).collect();
    Ok(VaRCovariance { xi, degenerate_assets })
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let (max, min) = (sv.max(), sv.min());
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `Ξ⁻¹l / (l'Ξ⁻¹l)`
pub fn gmvar_weights(xi: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = xi.nrows();
    if n == 0 || !xi.is_square() {
        return Err(Error::invalid("Ξ must be a non-empty square matrix"));
    }
    let cond = condition_number(xi);
    if !(cond < MAX_CONDITION) {
        return Err(Error::SingularXi(cond));
    }
    let ones = DVector::from_element(n, 1.0);
    let x = xi.clone().lu().solve(&ones).ok_or(Error::SingularXi(cond))?;
    let denom = x.sum();
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::SingularXi(cond));
    }
    Ok(x.iter().map(|v| v / denom).collect())
}

/// Returns `(w'Ξw, √(w'Ξw))`.
pub fn gmvar_value(xi: &DMatrix<f64>, weights: &[f64]) -> Result<(f64, f64)> {
    if weights.len() != xi.nrows() {
        return Err(Error::invalid(format!("{} weights for a {}-asset Ξ", weights.len(), xi.nrows())));
    }
    let w = DVector::from_column_slice(weights);
    let q = w.dot(&(xi * &w));
    if q < -1e-12 * xi.amax().max(f64::MIN_POSITIVE) {
        return Err(Error::NumericalPsd(q));
    }
    Ok((q, q.max(0.0).sqrt()))
}

pub fn annualize_var(daily: f64) -> f64 {
    daily * TRADING_DAYS.sqrt()
}

pub fn annualize_return(daily: f64) -> f64 {
    daily * TRADING_DAYS
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontierPoint {
    pub target: f64,
    pub weights: Vec<f64>,
    /// `w'Ξw`
    pub quadratic: f64,
    /// `√(w'Ξw)`
    pub var: f64,
}

/// Long-only minimum-VaR portfolio with expected return `target`:
/// minimize `w'Ξw` subject to `l'w = 1`, `μ'w = target`, `w ≥ 0`.
pub fn frontier_point(xi: &DMatrix<f64>, mu: &[f64], target: f64) -> Result<FrontierPoint> {
    let n = mu.len();
    if xi.nrows() != n || xi.ncols() != n || n == 0 {
        return Err(Error::invalid(format!("{n} expected returns for a {}x{} Ξ", xi.nrows(), xi.ncols())));
    }
    let lo = mu.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let slack = 1e-12 * lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    if !(target >= lo - slack && target <= hi + slack) {
        return Err(Error::TargetInfeasible { target, lo, hi });
    }
    let target = target.clamp(lo, hi);

    // work on a rescaled copy so tolerances are scale free
    let xs = xi.diagonal().amax().max(xi.amax());
    if xs == 0.0 {
        return Err(Error::SingularXi(f64::INFINITY));
    }
    let xi_s = xi / xs;
    let ms = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    let mu_s: Vec<f64> = mu.iter().map(|m| m / ms).collect();
    let weights = active_set(&xi_s, &mu_s, target / ms)?;
    let (quadratic, var) = gmvar_value(xi, &weights)?;
    Ok(FrontierPoint { target, weights, quadratic, var })
}

/// Frontier points at `points` equally spaced targets from `min μ` to `max μ`.
pub fn efficient_frontier(xi: &DMatrix<f64>, mu: &[f64], points: usize) -> Result<Vec<FrontierPoint>> {
    if points < 2 {
        return Err(Error::invalid("a frontier needs at least two points"));
    }
    let lo = mu.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..points)
        .map(|k| {
            let target = if k + 1 == points { hi } else { lo + (hi - lo) * k as f64 / (points - 1) as f64 };
            frontier_point(xi, mu, target)
        })
        .collect()
}

fn feasible_start(mu: &[f64], target: f64) -> Vec<f64> {
    let n = mu.len();
    let mean = mu.iter().sum::<f64>() / n as f64;
    let uniform = vec![1.0 / n as f64; n];
    if target == mean {
        return uniform;
    }
    let pick = if target < mean {
        (0..n).min_by(|&a, &b| mu[a].total_cmp(&mu[b])).unwrap()
    } else {
        (0..n).max_by(|&a, &b| mu[a].total_cmp(&mu[b])).unwrap()
    };
    let s = ((mean - target) / (mean - mu[pick])).clamp(0.0, 1.0);
    let mut w: Vec<f64> = uniform.iter().map(|u| (1.0 - s) * u).collect();
    w[pick] += s;
    w
}

/// Columns spanning `{p : A p = 0}` for the `2 × k` constraint block `A`.
fn null_space(a: &DMatrix<f64>) -> DMatrix<f64> {
    let k = a.ncols();
    let ata = a.transpose() * a;
    let eig = SymmetricEigen::new(ata);
    let tol = 1e-12 * eig.eigenvalues.amax().max(1.0);
    let cols: Vec<usize> = (0..k).filter(|&j| eig.eigenvalues[j].abs() <= tol).collect();
    DMatrix::from_fn(k, cols.len(), |i, j| eig.eigenvectors[(i, cols[j])])
}

struct Multipliers {
    nu: DVector<f64>,
    bound: Vec<f64>,
}

/// Equality multipliers from the free gradient and bound multipliers
/// `λᵢ = gᵢ − aᵢ'ν` for the fixed coordinates.
fn multipliers(g: &DVector<f64>, a: &DMatrix<f64>, free: &[bool]) -> Multipliers {
    let n = g.len();
    let fidx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
    let nu = if fidx.is_empty() {
        DVector::zeros(2)
    } else {
        let af_t = DMatrix::from_fn(fidx.len(), 2, |i, r| a[(r, fidx[i])]);
        let gf = DVector::from_iterator(fidx.len(), fidx.iter().map(|&i| g[i]));
        af_t.svd(true, true).solve(&gf, 1e-12).unwrap_or_else(|_| DVector::zeros(2))
    };
    let bound = (0..n).map(|i| if free[i] { 0.0 } else { g[i] - a[(0, i)] * nu[0] - a[(1, i)] * nu[1] }).collect();
    Multipliers { nu, bound }
}

fn active_set(xi: &DMatrix<f64>, mu: &[f64], target: f64) -> Result<Vec<f64>> {
    let n = mu.len();
    let a = DMatrix::from_fn(2, n, |r, i| if r == 0 { 1.0 } else { mu[i] });
    let mut w = DVector::from_vec(feasible_start(mu, target));
    let mut free: Vec<bool> = w.iter().map(|v| *v > 0.0).collect();
    let max_iter = 50 * n + 100;
    let step_tol = 1e-14;
    let mult_tol = 1e-12;

    for _ in 0..max_iter {
        let g = xi * &w;
        let fidx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        let af = DMatrix::from_fn(2, fidx.len(), |r, j| a[(r, fidx[j])]);
        let z = null_space(&af);
        let mut p = DVector::zeros(n);
        if z.ncols() > 0 {
            let xff = DMatrix::from_fn(fidx.len(), fidx.len(), |i, j| xi[(fidx[i], fidx[j])]);
            let gf = DVector::from_iterator(fidx.len(), fidx.iter().map(|&i| g[i]));
            let h = z.transpose() * &xff * &z;
            let rhs = -(z.transpose() * gf);
            let step = match h.clone().cholesky() {
                Some(c) => c.solve(&rhs),
                None => h.svd(true, true).solve(&rhs, 1e-14).map_err(|_| Error::QpFailure(0))?,
            };
            let pf = &z * step;
            for (j, &i) in fidx.iter().enumerate() {
                p[i] = pf[j];
            }
        }

        if p.amax() <= step_tol {
            let m = multipliers(&g, &a, &free);
            let worst = (0..n)
                .filter(|&i| !free[i])
                .min_by(|&x, &y| m.bound[x].total_cmp(&m.bound[y]));
            match worst {
                Some(i) if m.bound[i] < -mult_tol => free[i] = true,
                _ => {
                    let lambda: Vec<f64> = m.bound.iter().map(|b| b.max(0.0)).collect();
                    check_kkt(xi, &a, mu, target, &w, &m.nu, &lambda)?;
                    return Ok(w.iter().map(|v| v.max(0.0)).collect());
                }
            }
            continue;
        }

        let mut alpha = 1.0;
        let mut blocking = None;
        for &i in &fidx {
            if p[i] < 0.0 {
                let r = -w[i] / p[i];
                if r < alpha {
                    alpha = r;
                    blocking = Some(i);
                }
            }
        }
        w += alpha * &p;
        if let Some(i) = blocking {
            w[i] = 0.0;
            free[i] = false;
        }
    }
    Err(Error::QpFailure(max_iter))
}

fn check_kkt(
    xi: &DMatrix<f64>,
    a: &DMatrix<f64>,
    mu: &[f64],
    target: f64,
    w: &DVector<f64>,
    nu: &DVector<f64>,
    lambda: &[f64],
) -> Result<()> {
    let g = xi * w;
    let lam = DVector::from_column_slice(lambda);
    let stationarity = (&g - a.transpose() * nu - &lam).amax();
    let budget = (w.sum() - 1.0).abs();
    let ret = (w.iter().zip(mu).map(|(x, m)| x * m).sum::<f64>() - target).abs();
    let negativity = w.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
    let complementarity = w.iter().zip(lambda).map(|(x, l)| (x * l).abs()).fold(0.0, f64::max);
    let residual = stationarity.max(budget).max(ret).max(negativity).max(complementarity);
    if residual > KKT_TOLERANCE {
        return Err(Error::QpFailure(0));
    }
    Ok(())
}

/// `target,var,quadratic,w_<asset>...`
pub fn write_frontier_csv<W: Write>(points: &[FrontierPoint], assets: &[String], mut w: W) -> Result<()> {
    write!(w, "target,var,quadratic")?;
    for a in assets {
        write!(w, ",w_{a}")?;
    }
    writeln!(w)?;
    for p in points {
        write!(w, "{},{},{}", p.target, p.var, p.quadratic)?;
        for x in &p.weights {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
