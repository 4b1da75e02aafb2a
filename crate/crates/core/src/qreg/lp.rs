//! Linear-programming machinery for `min Σ ρ_τ(y − Xb)` over a sparse design.
//!
//! The bounded-variable dual (`max y'a s.t. X'a = (1−τ)X'1, 0 ≤ a ≤ 1`) is
//! solved with a Mehrotra predictor–corrector primal–dual interior point
//! (Frisch–Newton). Rows are short (a fixed-effect indicator plus a few
//! slopes), so the normal matrix `X'QX` is assembled from sparse outer
//! products and factored densely; its order is the parameter count.
//!
//! The interior solution is then polished by exact coordinate-wise line
//! minimisation, which moves every coordinate onto a kink of the objective
//! and leaves no improving signed unit direction.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Row-compressed design with a column-compressed mirror for coordinate access.
#[derive(Debug, Clone)]
pub(crate) struct SparseDesign {
    pub ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
    col_ptr: Vec<usize>,
    row_of: Vec<usize>,
    col_vals: Vec<f64>,
}

impl SparseDesign {
    #[cfg(test)]
    pub fn from_rows(ncols: usize, rows: impl IntoIterator<Item = Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        for mut row in rows {
            row.sort_unstable_by_key(|e| e.0);
            for (c, v) in row {
                if v != 0.0 {
                    col_idx.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self::from_csr(ncols, row_ptr, col_idx, vals)
    }

    /// Fixed-effects design: row `r` has a one in column `asset_index[r]`
    /// followed by its `p` regressors in columns `n..n+p`. With `λ > 0`, two
    /// rows `±λ e_i` per asset are appended.
    pub fn panel(n: usize, p: usize, asset_index: &[usize], regressors: &[f64], lambda: f64) -> Self {
        let m = asset_index.len();
        let extra = if lambda > 0.0 { 2 * n } else { 0 };
        let mut row_ptr = Vec::with_capacity(m + extra + 1);
        let mut col_idx = Vec::with_capacity(m * (p + 1) + extra);
        let mut vals = Vec::with_capacity(m * (p + 1) + extra);
        row_ptr.push(0);
        for (r, &a) in asset_index.iter().enumerate() {
            col_idx.push(a);
            vals.push(1.0);
            for (j, &v) in regressors[r * p..(r + 1) * p].iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(n + j);
                    vals.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        if lambda > 0.0 {
            for i in 0..n {
                for sign in [1.0, -1.0] {
                    col_idx.push(i);
                    vals.push(sign * lambda);
                    row_ptr.push(col_idx.len());
                }
            }
        }
        Self::from_csr(n + p, row_ptr, col_idx, vals)
    }

    /// Column indices within each row must be ascending.
    fn from_csr(ncols: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>, vals: Vec<f64>) -> Self {
        let m = row_ptr.len() - 1;
        let mut counts = vec![0usize; ncols + 1];
        for &c in &col_idx {
            counts[c + 1] += 1;
        }
        for j in 0..ncols {
            counts[j + 1] += counts[j];
        }
        let col_ptr = counts.clone();
        let mut next = counts;
        let mut row_of = vec![0; col_idx.len()];
        let mut col_vals = vec![0.0; col_idx.len()];
        for r in 0..m {
            debug_assert!(col_idx[row_ptr[r]..row_ptr[r + 1]].windows(2).all(|w| w[0] < w[1]));
            for e in row_ptr[r]..row_ptr[r + 1] {
                let c = col_idx[e];
                row_of[next[c]] = r;
                col_vals[next[c]] = vals[e];
                next[c] += 1;
            }
        }
        Self { ncols, row_ptr, col_idx, vals, col_ptr, row_of, col_vals }
    }

    pub fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |e| (self.col_idx[e], self.vals[e]))
    }

    fn column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.col_ptr[j]..self.col_ptr[j + 1]).map(move |e| (self.row_of[e], self.col_vals[e]))
    }

    /// `X b`
    pub fn mul(&self, b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nrows()];
        self.mul_into(b, &mut out);
        out
    }

    fn mul_into(&self, b: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
            *o = self.col_idx[lo..hi].iter().zip(&self.vals[lo..hi]).map(|(&c, v)| v * b[c]).sum();
        }
    }

    /// `X' v`
    fn tmul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (r, vr) in v.iter().enumerate() {
            for (c, x) in self.row(r) {
                out[c] += x * vr;
            }
        }
        out
    }

    /// `X' diag(d) X`
    pub fn weighted_gram(&self, d: &[f64]) -> DMatrix<f64> {
        let k = self.ncols;
        let mut acc = vec![0.0; k * k];
        for (r, dr) in d.iter().enumerate() {
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let cols = &self.col_idx[a..b];
            let vals = &self.vals[a..b];
            for e in 0..cols.len() {
                let vi = vals[e] * dr;
                let ci = cols[e];
                let row = &mut acc[ci * k..ci * k + ci + 1];
                for f in 0..=e {
                    row[cols[f]] += vi * vals[f];
                }
            }
        }
        let mut m = DMatrix::from_fn(k, k, |i, j| acc[i * k + j]);
        m.fill_upper_triangle_with_lower_triangle();
        m
    }
}

pub(crate) fn check_loss(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

pub(crate) fn total_loss(residuals: &[f64], tau: f64) -> f64 {
    residuals.iter().map(|&u| check_loss(u, tau)).sum()
}

#[derive(Debug, Clone)]
pub(crate) struct LpSolution {
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub gap: f64,
}

const STEP: f64 = 0.99995;

fn cholesky_solve(m: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Some(c);
    }
    let k = m.nrows();
    let ridge = m.trace().abs() / k.max(1) as f64 * 1e-13 + f64::MIN_POSITIVE;
    let mut reg = m.clone();
    for i in 0..k {
        reg[(i, i)] += ridge;
    }
    reg.cholesky()
}

/// Largest step keeping `v + t·dv` non-negative.
fn ratio(v: f64, dv: f64) -> f64 {
    if dv < 0.0 {
        -v / dv
    } else {
        f64::INFINITY
    }
}

/// Frisch–Newton interior point. Stops when the duality gap is at most
/// `tol` times the attained objective.
pub(crate) fn interior_point(
    x: &SparseDesign,
    y: &[f64],
    tau: f64,
    tol: f64,
    max_iter: usize,
) -> Result<LpSolution> {
    let m = x.nrows();
    let k = x.ncols;
    let mut xp = vec![1.0 - tau; m];
    let mut s = vec![tau; m];

    let mut q = vec![1.0; m];
    let gram = x.weighted_gram(&q);
    let chol = cholesky_solve(&gram).ok_or(Error::SolverFailure { iterations: 0, gap: f64::NAN })?;
    let neg_y: Vec<f64> = y.iter().map(|v| -v).collect();
    let mut yd = chol.solve(&DVector::from_vec(x.tmul(&neg_y))).as_slice().to_vec();

    // residuals of the dual constraint, c − X yd with c = −y
    let mut ax = vec![0.0; m];
    x.mul_into(&yd, &mut ax);
    let shift = 0.1 * (0..m).map(|i| (y[i] + ax[i]).abs()).sum::<f64>() / m as f64 + 1e-14;
    let mut z = vec![0.0; m];
    let mut w = vec![0.0; m];
    for i in 0..m {
        let r = -y[i] - ax[i];
        z[i] = r.max(0.0) + shift;
        w[i] = (-r).max(0.0) + shift;
    }

    let y_scale = 1e-12 * y.iter().map(|v| v.abs()).sum::<f64>() + f64::MIN_POSITIVE;
    let mut gap = f64::INFINITY;
    let mut tmp = vec![0.0; m];
    let mut ady = vec![0.0; m];
    let mut dx = vec![0.0; m];
    let mut dz = vec![0.0; m];
    let mut dw = vec![0.0; m];
    let mut rz = vec![0.0; m];
    let mut rw = vec![0.0; m];

    for it in 0..max_iter {
        gap = (0..m).map(|i| xp[i] * z[i] + s[i] * w[i]).sum();
        // coefficients are −yd, so residuals y − X(−yd) = y + X yd
        x.mul_into(&yd, &mut ax);
        let obj: f64 = (0..m).map(|i| check_loss(y[i] + ax[i], tau)).sum();
        if gap <= tol * obj.max(y_scale) {
            return Ok(LpSolution { coef: yd.iter().map(|v| -v).collect(), iterations: it, gap });
        }

        for i in 0..m {
            q[i] = 1.0 / (z[i] / xp[i] + w[i] / s[i]);
            tmp[i] = q[i] * (z[i] - w[i]);
        }
        let normal = x.weighted_gram(&q);
        let chol = cholesky_solve(&normal).ok_or(Error::SolverFailure { iterations: it, gap })?;

        // affine-scaling predictor
        let dy = chol.solve(&DVector::from_vec(x.tmul(&tmp)));
        x.mul_into(dy.as_slice(), &mut ady);
        let (mut px, mut dd) = (f64::INFINITY, f64::INFINITY);
        for i in 0..m {
            let d = q[i] * (ady[i] - (z[i] - w[i]));
            dx[i] = d;
            dz[i] = -z[i] - z[i] / xp[i] * d;
            dw[i] = -w[i] + w[i] / s[i] * d;
            px = px.min(ratio(xp[i], d)).min(ratio(s[i], -d));
            dd = dd.min(ratio(z[i], dz[i])).min(ratio(w[i], dw[i]));
        }
        let ap = (STEP * px).min(1.0);
        let ad = (STEP * dd).min(1.0);
        let mu_aff: f64 = (0..m)
            .map(|i| (xp[i] + ap * dx[i]) * (z[i] + ad * dz[i]) + (s[i] - ap * dx[i]) * (w[i] + ad * dw[i]))
            .sum();
        let sigma = (mu_aff / gap).powi(3);
        let mu = sigma * gap / (2 * m) as f64;

        // centering corrector
        for i in 0..m {
            rz[i] = mu - xp[i] * z[i] - dx[i] * dz[i];
            rw[i] = mu - s[i] * w[i] + dx[i] * dw[i];
            let v = rz[i] / xp[i] - rw[i] / s[i];
            tmp[i] = -q[i] * v;
        }
        let dy = chol.solve(&DVector::from_vec(x.tmul(&tmp)));
        x.mul_into(dy.as_slice(), &mut ady);
        let (mut px, mut dd) = (f64::INFINITY, f64::INFINITY);
        for i in 0..m {
            let v = rz[i] / xp[i] - rw[i] / s[i];
            let d = q[i] * (ady[i] + v);
            dx[i] = d;
            dz[i] = (rz[i] - z[i] * d) / xp[i];
            dw[i] = (rw[i] + w[i] * d) / s[i];
            px = px.min(ratio(xp[i], d)).min(ratio(s[i], -d));
            dd = dd.min(ratio(z[i], dz[i])).min(ratio(w[i], dw[i]));
        }
        let ap = (STEP * px).min(1.0);
        let ad = (STEP * dd).min(1.0);
        for i in 0..m {
            xp[i] += ap * dx[i];
            s[i] -= ap * dx[i];
            z[i] += ad * dz[i];
            w[i] += ad * dw[i];
        }
        for j in 0..k {
            yd[j] += ad * dy[j];
        }
        if !gap.is_finite() || yd.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverFailure { iterations: it, gap });
        }
    }
    Err(Error::SolverFailure { iterations: max_iter, gap })
}

/// Exact minimiser of `t ↦ Σ ρ_τ(u_r − t c_r)` over the column's rows.
fn line_minimizer(entries: &mut [(f64, f64)], tau: f64) -> f64 {
    // entries: (breakpoint u/c, c)
    let mut slope: f64 = entries
        .iter()
        .map(|&(_, c)| if c > 0.0 { -c * tau } else { c * (1.0 - tau) })
        .sum();
    entries.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    for &(t, c) in entries.iter() {
        slope += c.abs();
        if slope >= 0.0 {
            return t;
        }
    }
    entries.last().map_or(0.0, |e| e.0)
}

/// Coordinate-wise exact line minimisation starting at `coef`.
pub(crate) fn polish(x: &SparseDesign, y: &[f64], tau: f64, coef: &mut [f64], max_sweeps: usize) {
    let fitted = x.mul(coef);
    let mut u: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let scale = total_loss(&u, tau).max(f64::MIN_POSITIVE);
    let mut buf = Vec::new();
    for _ in 0..max_sweeps {
        let mut moved = false;
        for j in 0..x.ncols {
            buf.clear();
            buf.extend(x.column(j).map(|(r, c)| (u[r] / c, c)));
            if buf.is_empty() {
                continue;
            }
            let t = line_minimizer(&mut buf, tau);
            if t == 0.0 {
                continue;
            }
            let delta: f64 = x
                .column(j)
                .map(|(r, c)| check_loss(u[r] - t * c, tau) - check_loss(u[r], tau))
                .sum();
            if delta < -1e-15 * scale {
                coef[j] += t;
                for (r, c) in x.column(j) {
                    u[r] -= t * c;
                }
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

/// Picks `k` linearly independent rows, preferring small `|u|`.
fn crash_basis(x: &SparseDesign, u: &[f64]) -> Option<Vec<usize>> {
    let k = x.ncols;
    let by_size = |&a: &usize, &b: &usize| u[a].abs().total_cmp(&u[b].abs()).then(a.cmp(&b));
    let mut order: Vec<usize> = (0..u.len()).collect();
    // a few times k candidates nearly always contain an independent set
    let shortlist = (4 * k).min(order.len());
    if shortlist < order.len() {
        order.select_nth_unstable_by(shortlist, by_size);
        let (head, tail) = order.split_at_mut(shortlist);
        head.sort_unstable_by(by_size);
        tail.sort_unstable_by(by_size);
    } else {
        order.sort_unstable_by(by_size);
    }
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut basis = Vec::with_capacity(k);
    for r in order {
        let mut v = vec![0.0; k];
        for (c, val) in x.row(r) {
            v[c] = val;
        }
        let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for e in &q {
                let d: f64 = e.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(e).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 * norm0 {
            v.iter_mut().for_each(|a| *a /= norm);
            q.push(v);
            basis.push(r);
            if basis.len() == k {
                return Some(basis);
            }
        }
    }
    None
}

/// One-sided derivative of `ρ_τ` at residual `u` when it moves at `rate`.
fn rho_slope(u: f64, rate: f64, tau: f64, zero_tol: f64) -> f64 {
    if u > zero_tol || (u >= -zero_tol && rate > 0.0) {
        tau * rate
    } else {
        (tau - 1.0) * rate
    }
}

/// Simplex descent along the edges of the vertex defined by a basis of
/// `k` zero-residual rows, starting from the rows that fit `start` best.
/// Returns the final vertex only if it passes [`certify`].
pub(crate) fn simplex(
    x: &SparseDesign,
    y: &[f64],
    tau: f64,
    start: &[f64],
    zero_tol: f64,
    max_pivots: usize,
) -> Option<Vec<f64>> {
    let m = x.nrows();
    let k = x.ncols;
    let fitted = x.mul(start);
    let mut u: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let mut basis = crash_basis(x, &u)?;
    let mut in_basis = vec![usize::MAX; m];
    let mut g = vec![0.0; m * k];
    let mut coef = vec![0.0; k];
    let mut breaks: Vec<(f64, f64, usize)> = Vec::new();

    for _ in 0..=max_pivots {
        let xh = DMatrix::from_fn(k, k, |r, c| x.row(basis[r]).find(|e| e.0 == c).map_or(0.0, |e| e.1));
        let inv = xh.try_inverse()?;
        let yh = DVector::from_iterator(k, basis.iter().map(|&r| y[r]));
        let b = &inv * yh;
        coef.copy_from_slice(b.as_slice());
        x.mul_into(&coef, &mut u);
        for (ui, yi) in u.iter_mut().zip(y) {
            *ui = yi - *ui;
        }
        in_basis.iter_mut().for_each(|v| *v = usize::MAX);
        for (j, &r) in basis.iter().enumerate() {
            in_basis[r] = j;
            u[r] = 0.0;
        }

        // g[i, j] = x_i' X_h⁻¹ e_j
        let mut d_plus = vec![tau; k];
        let mut d_minus = vec![1.0 - tau; k];
        let inv_rows: Vec<f64> = (0..k * k).map(|e| inv[(e / k, e % k)]).collect();
        for i in 0..m {
            let gi = &mut g[i * k..(i + 1) * k];
            gi.iter_mut().for_each(|v| *v = 0.0);
            for (c, val) in x.row(i) {
                for (gij, ic) in gi.iter_mut().zip(&inv_rows[c * k..(c + 1) * k]) {
                    *gij += val * ic;
                }
            }
            if in_basis[i] != usize::MAX {
                continue;
            }
            for j in 0..k {
                d_plus[j] += rho_slope(u[i], gi[j], tau, zero_tol);
                d_minus[j] += rho_slope(u[i], -gi[j], tau, zero_tol);
            }
        }
        let (mut best, mut leave, mut sign) = (-1e-12, usize::MAX, 0.0);
        for j in 0..k {
            if d_plus[j] < best {
                (best, leave, sign) = (d_plus[j], j, 1.0);
            }
            if d_minus[j] < best {
                (best, leave, sign) = (d_minus[j], j, -1.0);
            }
        }
        if leave == usize::MAX {
            return certify(x, y, tau, &coef, zero_tol).then_some(coef);
        }

        // ratio test: weighted quantile of the zero crossings along the edge
        breaks.clear();
        for i in 0..m {
            if in_basis[i] != usize::MAX || u[i].abs() <= zero_tol {
                continue;
            }
            let rate = sign * g[i * k + leave];
            if u[i] * rate < 0.0 {
                breaks.push((-u[i] / rate, rate.abs(), i));
            }
        }
        breaks.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        let mut slope = best;
        let mut enter = None;
        for &(_, w, i) in &breaks {
            slope += w;
            if slope >= 0.0 {
                enter = Some(i);
                break;
            }
        }
        basis[leave] = enter?;
    }
    None
}

/// Checks first-order optimality at `coef` by constructing a subgradient:
/// `ψᵢ = τ − 1{uᵢ < 0}` off the kinks and `ψᵢ ∈ [τ − 1, τ]` on them, with
/// `X'ψ = 0`. Residuals within `zero_tol` of zero count as kinks.
pub(crate) fn certify(x: &SparseDesign, y: &[f64], tau: f64, coef: &[f64], zero_tol: f64) -> bool {
    let k = x.ncols;
    let fitted = x.mul(coef);
    let mut rhs = vec![0.0; k];
    let mut kinks = Vec::new();
    for (r, (yr, fr)) in y.iter().zip(&fitted).enumerate() {
        let u = yr - fr;
        if u.abs() <= zero_tol {
            kinks.push(r);
            continue;
        }
        let psi = if u > 0.0 { tau } else { tau - 1.0 };
        for (c, v) in x.row(r) {
            rhs[c] -= v * psi;
        }
    }
    // centre the kink multipliers at the middle of their box
    let mid = tau - 0.5;
    let mut a = DMatrix::zeros(k, kinks.len());
    for (j, &r) in kinks.iter().enumerate() {
        for (c, v) in x.row(r) {
            a[(c, j)] = v;
            rhs[c] -= v * mid;
        }
    }
    let scale = rhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let b = DVector::from_vec(rhs);
    let delta = if kinks.is_empty() {
        DVector::zeros(0)
    } else {
        match a.clone().svd(true, true).solve(&b, 1e-12) {
            Ok(d) => d,
            Err(_) => return false,
        }
    };
    let residual = (&a * &delta - &b).amax();
    residual <= 1e-9 * scale && delta.iter().all(|d| d.abs() <= 0.5 + 1e-9)
}

/// Minimum over coordinates and signs of the one-sided directional derivative.
/// Residuals within `zero_tol` of zero count as sitting on a kink.
pub(crate) fn min_directional_derivative(
    x: &SparseDesign,
    y: &[f64],
    tau: f64,
    coef: &[f64],
    zero_tol: f64,
) -> f64 {
    let fitted = x.mul(coef);
    let u: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let mut worst = f64::INFINITY;
    for j in 0..x.ncols {
        for dir in [1.0, -1.0] {
            let d: f64 = x
                .column(j)
                .map(|(r, c)| {
                    // residual moves by -dir*c per unit step
                    let g = -dir * c;
                    if u[r].abs() <= zero_tol {
                        if g > 0.0 {
                            g * tau
                        } else {
                            -g * (1.0 - tau)
                        }
                    } else if u[r] > 0.0 {
                        g * tau
                    } else {
                        g * (tau - 1.0)
                    }
                })
                .sum();
            worst = worst.min(d);
        }
    }
    worst
}
