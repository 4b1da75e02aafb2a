//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Criteria 3 to 6 share one Monte-Carlo study of 20 replications of a
//! five-asset MVN panel (2613 days, 420 intraday steps), computed once.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use panelvar_core::backtest::{dm_test, dq_test, hit_rate, hits, DmFlag};
use panelvar_core::portfolio::{efficient_frontier, frontier_point, gmvar_weights};
use panelvar_core::qreg::{fit, min_directional_derivative, quantile_loss};
use panelvar_core::realized::{compute_measures, correlation_from_covariance, realized_covariance};
use panelvar_core::rng::stream;
use panelvar_core::simulate::{simulate_paths, SimConfig};
use panelvar_core::study::{run_study, StudyConfig, StudyResults};
use panelvar_core::var::{normal_var, standard_normal_quantile};
use panelvar_core::{AssetMeasures, FitMode, ModelKind, QuantileProblem};
use rand::Rng;
use rand_distr::StandardNormal;

const PQR: [ModelKind; 3] = [ModelKind::PqrRv, ModelKind::PqrRsv, ModelKind::PqrBpv];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn study() -> &'static StudyResults {
    static RESULTS: OnceLock<StudyResults> = OnceLock::new();
    RESULTS.get_or_init(|| {
        let config = StudyConfig {
            sim: SimConfig { n_assets: 5, seed: 0, ..SimConfig::default() },
            replications: 20,
            models: vec![ModelKind::PqrRv, ModelKind::PqrRsv, ModelKind::PqrBpv, ModelKind::UqrRv, ModelKind::RiskMetrics],
            in_sample_taus: vec![0.05, 0.10, 0.50, 0.90, 0.95],
            taus: vec![0.05, 0.10, 0.90, 0.95],
            mc_reps: 999,
            ..StudyConfig::default()
        };
        let start = Instant::now();
        let results = run_study(&config).expect("Monte-Carlo study");
        println!("  (study: {} replications in {:.0?})", config.replications, start.elapsed());
        results
    })
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = stream(1, 0);
    let mut days = 0usize;
    let mut worst_identity = 0.0f64;
    let mut bad = Vec::new();
    let check_corr = |cov: &DMatrix<f64>, bad: &mut Vec<String>| {
        let c = correlation_from_covariance(cov).unwrap();
        for i in 0..c.nrows() {
            if (c[(i, i)] - 1.0).abs() > 1e-12 || c.row(i).iter().any(|r| r.abs() > 1.0) {
                bad.push("correlation".into());
            }
        }
    };
    let mut check_asset = |m: &AssetMeasures, bad: &mut Vec<String>| {
        let err = (m.rv - m.rs_plus - m.rs_minus).abs() / m.rv.max(f64::MIN_POSITIVE);
        worst_identity = worst_identity.max(err);
        if err > 1e-12 || !(m.jv >= 0.0 && m.jv <= m.rv) {
            bad.push(format!("rv {} rs+ {} rs- {} jv {}", m.rv, m.rs_plus, m.rs_minus, m.jv));
        }
    };

    // random days
    while days < 5000 {
        let n = rng.random_range(2..6);
        let len = rng.random_range(3..400);
        let scale = 10f64.powf(rng.random_range(-4.0..-1.0));
        let returns: Vec<Vec<f64>> =
            (0..n).map(|_| (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        for r in &returns {
            check_asset(&AssetMeasures::from_returns(r).unwrap(), &mut bad);
        }
        check_corr(&realized_covariance(&returns).unwrap(), &mut bad);
        days += 1;
    }
    // simulated days
    let sim = SimConfig { days: 5000, n_assets: 3, intraday_steps: 84, seed: 2, ..SimConfig::default() };
    let out = simulate_paths(&sim, None).unwrap();
    for day in compute_measures(&out.panel).unwrap() {
        day.assets.iter().for_each(|m| check_asset(m, &mut bad));
        check_corr(&day.cov, &mut bad);
        days += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    outcome(
        bad.is_empty() && elapsed < 10.0,
        format!("{days} days, {} violations, worst RV identity error {worst_identity:.1e}, {elapsed:.1}s", bad.len()),
    )
}

fn sample_quantile_objective(y: &[f64], tau: f64) -> f64 {
    let mut s = y.to_vec();
    s.sort_by(f64::total_cmp);
    let k = ((tau * s.len() as f64).ceil() as usize).max(1) - 1;
    y.iter().map(|v| quantile_loss(v - s[k], tau)).sum()
}

fn random_panel(seed: u64, n: usize, p: usize, rows: usize, tau: f64, mode: FitMode) -> QuantileProblem {
    let mut rng = stream(seed, 0);
    let beta: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (mut y, mut x, mut assets, mut days) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for a in 0..n {
        let alpha = rng.random_range(-1.0..1.0);
        for t in 0..rows {
            let v: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..2.0)).collect();
            let e: f64 = rng.sample(StandardNormal);
            y.push(alpha + v.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + e * (0.5 + v[0]));
            x.extend(v);
            assets.push(a);
            days.push(t);
        }
    }
    let names = (0..p).map(|j| format!("b{j}")).collect();
    let asset_names = (0..n).map(|a| format!("A{a}")).collect();
    QuantileProblem::new(y, x, names, assets, asset_names, days, tau, 0.0, mode).unwrap()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let (mut worst_obj, mut worst_dd, mut worst_panel) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..200u64 {
        let mut rng = stream(100, i);
        let n = rng.random_range(5..300);
        let tau = rng.random_range(0.02..0.98);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let problem = QuantileProblem::single(y.clone(), vec![], vec![], tau).unwrap();
        let f = fit(&problem).unwrap();
        let oracle = sample_quantile_objective(&y, tau);
        worst_obj = worst_obj.max((f.objective - oracle).abs() / oracle.max(1.0));
        worst_dd = worst_dd.max(-min_directional_derivative(&problem, &f));
    }
    for i in 0..40u64 {
        let tau = [0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95][i as usize % 7];
        let mode = if i % 2 == 0 { FitMode::Panel } else { FitMode::Univariate };
        let problem = random_panel(200 + i, 1 + i as usize % 4, 1 + i as usize % 3, 60 + (i as usize % 5) * 30, tau, mode);
        let f = fit(&problem).unwrap();
        worst_dd = worst_dd.max(-min_directional_derivative(&problem, &f));
    }
    for i in 0..20u64 {
        let panel = random_panel(300 + i, 1, 2, 150, 0.05 + 0.045 * i as f64, FitMode::Panel);
        let uni = panel.with_mode(FitMode::Univariate);
        let (a, b) = (fit(&panel).unwrap(), fit(&uni).unwrap());
        worst_panel = worst_panel.max((a.objective - b.objective).abs() / a.objective.max(1.0));
    }
    let elapsed = start.elapsed().as_secs_f64();
    outcome(
        worst_obj <= 1e-8 && worst_dd <= 1e-6 && worst_panel <= 1e-8 && elapsed < 60.0,
        format!(
            "location objective gap {worst_obj:.1e}, subgradient residual {worst_dd:.1e}, panel(n=1) vs univariate {worst_panel:.1e}, {elapsed:.1}s"
        ),
    )
}

fn criterion_3() -> Outcome {
    let s = study();
    let mut pass = true;
    let mut parts = Vec::new();
    for (tau, want) in [(0.05, -1.54), (0.50, 0.0), (0.95, 1.55)] {
        let b = s.mean_coefficient(ModelKind::PqrRv, tau, "beta_sqrt_rv").unwrap();
        pass &= (b - want).abs() <= 0.25;
        parts.push(format!("RV b({tau})={b:.3}"));
    }
    for tau in [0.05, 0.95] {
        let plus = s.mean_coefficient(ModelKind::PqrRsv, tau, "beta_sqrt_rs_plus").unwrap();
        let minus = s.mean_coefficient(ModelKind::PqrRsv, tau, "beta_sqrt_rs_minus").unwrap();
        pass &= (plus - minus).abs() < 0.2;
        parts.push(format!("RSV({tau}) {plus:.3}/{minus:.3}"));
    }
    let mut worst_jump = 0.0f64;
    for &tau in &s.config.in_sample_taus {
        worst_jump = worst_jump.max(s.mean_coefficient(ModelKind::PqrBpv, tau, "beta_sqrt_jv").unwrap().abs());
    }
    pass &= worst_jump < 0.15;
    parts.push(format!("max |jump b|={worst_jump:.3}"));
    outcome(pass, parts.join(", "))
}

fn criterion_4() -> Outcome {
    let s = study();
    let mut pass = true;
    let mut parts = Vec::new();
    let (mut rejections, mut tests) = (0.0, 0.0);
    for tau in [0.05, 0.10, 0.90, 0.95] {
        let row = s.panel_a_row(ModelKind::PqrRv, tau).unwrap();
        pass &= (row.tau_hat_avg - tau).abs() <= 0.01;
        rejections += row.dq_violations * s.replications.len() as f64;
        tests += s.replications.len() as f64;
        parts.push(format!("{tau}: cov {:.2}% dq {:.0}%", 100.0 * row.tau_hat_avg, 100.0 * row.dq_violations));
    }
    let rate = rejections / tests;
    pass &= (0.02..=0.12).contains(&rate);
    parts.push(format!("pooled DQ rejections {:.1}%", 100.0 * rate));
    outcome(pass, parts.join(", "))
}

fn criterion_5() -> Outcome {
    let s = study();
    let mut pass = true;
    let mut wins = Vec::new();
    let mut worst_loss = 0.0f64;
    for model in PQR {
        for tau in [0.05, 0.95] {
            let share = s.dominance(tau, model, ModelKind::RiskMetrics).unwrap();
            pass &= share > 0.5;
            wins.push(format!("{model}@{tau} {:.0}%", 100.0 * share));
        }
        for &tau in &s.config.taus {
            worst_loss = worst_loss.max(s.dominance(tau, ModelKind::RiskMetrics, model).unwrap());
        }
    }
    pass &= worst_loss < 0.05;
    outcome(pass, format!("PQR beats RiskMetrics: {}; RiskMetrics beats PQR at most {:.0}%", wins.join(" "), 100.0 * worst_loss))
}

fn random_xi(seed: u64, n: usize) -> DMatrix<f64> {
    let mut rng = stream(seed, 0);
    let a = DMatrix::from_fn(n, n + 2, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.02);
    &a * a.transpose() + DMatrix::identity(n, n) * 1e-5
}

/// Conjugate gradient in the null space of `1'`, from equal weights.
fn cg_minimizer(xi: &DMatrix<f64>) -> DVector<f64> {
    let n = xi.nrows();
    let project = |v: &DVector<f64>| v.add_scalar(-v.mean());
    let mut w = DVector::from_element(n, 1.0 / n as f64);
    let mut r = project(&(-(xi * &w) * 2.0));
    let mut p = r.clone();
    for _ in 0..10 * n {
        if r.norm() < 1e-16 {
            break;
        }
        let ap = project(&(xi * &p * 2.0));
        let alpha = r.dot(&r) / p.dot(&ap);
        w += &p * alpha;
        let next = &r - &ap * alpha;
        p = &next + &p * (next.dot(&next) / r.dot(&r));
        r = next;
    }
    w
}

fn criterion_6() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let xi = random_xi(10_000 + i, 2 + i as usize % 5);
        let closed = gmvar_weights(&xi).unwrap();
        let numeric = cg_minimizer(&xi);
        worst = closed.iter().zip(numeric.iter()).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    let s = study();
    let mut pass = worst <= 1e-6;
    let mut parts = vec![format!("closed form vs CG {worst:.1e}")];
    for tau in [0.05, 0.10] {
        let pqr = s.gmvar_levels(ModelKind::PqrRv, tau);
        let uqr = s.gmvar_levels(ModelKind::UqrRv, tau);
        let rm = s.gmvar_levels(ModelKind::RiskMetrics, tau);
        let ordered = (0..pqr.len()).filter(|&r| pqr[r] <= uqr[r] && uqr[r] <= rm[r]).count();
        let pqr_le_uqr = (0..pqr.len()).filter(|&r| pqr[r] <= uqr[r]).count();
        let uqr_le_rm = (0..pqr.len()).filter(|&r| uqr[r] <= rm[r]).count();
        pass &= 2 * ordered > pqr.len();
        let mean = |v: &[f64]| 100.0 * v.iter().sum::<f64>() / v.len() as f64;
        parts.push(format!(
            "{tau}: ordered in {ordered}/{} (PQR<=UQR {pqr_le_uqr}, UQR<=RM {uqr_le_rm}; means {:.2}/{:.2}/{:.2}%)",
            pqr.len(),
            mean(&pqr),
            mean(&uqr),
            mean(&rm)
        ));
    }
    outcome(pass, parts.join(", "))
}

/// Minimum of `w'Ξw` over every support on which the equality-constrained
/// problem has a nonnegative solution.
fn support_enumeration(xi: &DMatrix<f64>, mu: &[f64], target: f64) -> f64 {
    let n = mu.len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << n) {
        let s: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let k = s.len();
        let mut kkt = DMatrix::zeros(k + 2, k + 2);
        let mut rhs = DVector::zeros(k + 2);
        for (a, &i) in s.iter().enumerate() {
            for (b, &j) in s.iter().enumerate() {
                kkt[(a, b)] = 2.0 * xi[(i, j)];
            }
            kkt[(a, k)] = 1.0;
            kkt[(k, a)] = 1.0;
            kkt[(a, k + 1)] = mu[i];
            kkt[(k + 1, a)] = mu[i];
        }
        rhs[k] = 1.0;
        rhs[k + 1] = target;
        let Some(sol) = kkt.clone().lu().solve(&rhs) else { continue };
        if (&kkt * &sol - &rhs).amax() > 1e-9 || sol.iter().take(k).any(|w| *w < -1e-10) {
            continue;
        }
        let mut w = DVector::zeros(n);
        for (a, &i) in s.iter().enumerate() {
            w[i] = sol[a];
        }
        best = best.min(w.dot(&(xi * &w)));
    }
    best
}

/// Brute force over a simplex grid: all but two weights on a grid of step
/// `1/steps`, the last two solved from the budget and return constraints.
fn simplex_grid(xi: &DMatrix<f64>, mu: &[f64], target: f64, steps: usize) -> f64 {
    let n = mu.len();
    let (p, q) = (n - 2, n - 1);
    let mut best = f64::INFINITY;
    let mut idx = vec![0usize; p];
    loop {
        let used: usize = idx.iter().sum();
        if used <= steps {
            let mut w = DVector::zeros(n);
            for (i, k) in idx.iter().enumerate() {
                w[i] = *k as f64 / steps as f64;
            }
            let rest = 1.0 - used as f64 / steps as f64;
            let partial: f64 = (0..p).map(|i| w[i] * mu[i]).sum();
            if (mu[p] - mu[q]).abs() > 1e-15 {
                w[p] = (target - partial - mu[q] * rest) / (mu[p] - mu[q]);
                w[q] = rest - w[p];
                if w[p] >= 0.0 && w[q] >= 0.0 {
                    best = best.min(w.dot(&(xi * &w)));
                }
            }
        }
        let mut pos = 0;
        loop {
            if pos == p {
                return best;
            }
            idx[pos] += 1;
            if idx[pos] <= steps {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

fn kkt_residual(xi: &DMatrix<f64>, mu: &[f64], w: &[f64]) -> f64 {
    let n = mu.len();
    let g = (xi * DVector::from_column_slice(w)) * (2.0 / xi.amax());
    let free: Vec<usize> = (0..n).filter(|&i| w[i] > 1e-10).collect();
    let a = DMatrix::from_fn(free.len(), 2, |r, c| if c == 0 { 1.0 } else { mu[free[r]] });
    let b = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
    let nu = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
    let stationarity = (&a * &nu - &b).amax();
    let dual = (0..n)
        .filter(|i| !free.contains(i))
        .map(|i| (nu[0] + nu[1] * mu[i] - g[i]).max(0.0))
        .fold(0.0, f64::max);
    let primal = (w.iter().sum::<f64>() - 1.0).abs() + w.iter().map(|x| (-x).max(0.0)).sum::<f64>();
    stationarity.max(dual).max(primal)
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let (mut worst_enum, mut worst_grid, mut worst_kkt, mut worst_convex) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..60u64 {
        let n = 2 + i as usize % 5;
        let xi = random_xi(20_000 + i, n);
        let mut rng = stream(30_000, i);
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-0.001..0.002)).collect();
        let lo = mu.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for k in 0..5 {
            let target = lo + (hi - lo) * (0.05 + 0.9 * k as f64 / 4.0);
            let point = frontier_point(&xi, &mu, target).unwrap();
            let exact = support_enumeration(&xi, &mu, target);
            worst_enum = worst_enum.max((point.quadratic - exact).abs() / exact);
            let steps = [0, 0, 4000, 400, 60, 24, 12][n];
            let grid = simplex_grid(&xi, &mu, target, steps);
            worst_grid = worst_grid.max((point.quadratic - grid) / grid);
            worst_kkt = worst_kkt.max(kkt_residual(&xi, &mu, &point.weights));
        }
        if n >= 3 {
            let q: Vec<f64> = efficient_frontier(&xi, &mu, 25).unwrap().iter().map(|p| p.quadratic).collect();
            let scale = q.iter().copied().fold(0.0, f64::max);
            for k in 1..q.len() - 1 {
                worst_convex = worst_convex.max(-(q[k - 1] + q[k + 1] - 2.0 * q[k]) / scale);
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    outcome(
        worst_enum <= 1e-4 && worst_grid <= 1e-4 && worst_kkt <= 1e-7 && worst_convex <= 1e-9 && elapsed < 60.0,
        format!(
            "vs exact enumeration {worst_enum:.1e}, QP above grid optimum by at most {worst_grid:.1e}, KKT {worst_kkt:.1e}, convexity defect {worst_convex:.1e}, {elapsed:.1}s"
        ),
    )
}

fn criterion_8() -> Outcome {
    let (tau, trials, t) = (0.05, 500, 1000);
    let mut rng = stream(40_000, 0);
    let forecasts: Vec<f64> = (0..t).map(|k| -1.645 * (1.0 + 0.3 * (k as f64 / 40.0).sin())).collect();
    let mut p: Vec<f64> = (0..trials)
        .map(|trial| {
            let h: Vec<bool> = (0..t).map(|_| rng.random::<f64>() < tau).collect();
            dq_test(&h, &forecasts, tau, 4, 199, 50_000 + trial as u64).unwrap().p_value
        })
        .collect();
    p.sort_by(f64::total_cmp);
    let n = p.len() as f64;
    let ks = p
        .iter()
        .enumerate()
        .map(|(i, x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max);

    let base: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..1.0)).collect();
    let same = dm_test(&base, &base).unwrap();
    let dm_ok = same.statistic == 0.0 && same.flag == Some(DmFlag::IdenticalForecasts);

    let q = normal_var(&DMatrix::from_element(1, 1, 1.0), &[1.0], tau).unwrap().value;
    let m = 100_000;
    let r: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    let rate = hit_rate(&hits(&r, &vec![q; m]).unwrap());
    let se = (tau * (1.0 - tau) / m as f64).sqrt();
    let quantile_ok = (q - standard_normal_quantile(tau)).abs() < 1e-12;
    outcome(
        ks < 0.08 && dm_ok && quantile_ok && (rate - tau).abs() < 3.0 * se,
        format!(
            "DQ p-value KS distance {ks:.3} over {trials} trials, DM on identical forecasts {}, normal VaR hit rate {:.3}% ({:.1} SE)",
            same.statistic,
            100.0 * rate,
            (rate - tau) / se
        ),
    )
}

fn run_study_binary(dir: &Path, threads: &str) -> bool {
    let config = dir.with_extension("cfg");
    fs::write(
        &config,
        "# small study\nassets = 3\ndays = 260\nintraday_steps = 42\nwindow = 150\nmc_reps = 99\n\
         models = pqr-rv, uqr-rv, riskmetrics\nin_sample_taus = 0.05, 0.5\n",
    )
    .unwrap();
    Command::new(env!("CARGO_BIN_EXE_panelvar"))
        .args(["study", "--config", config.to_str().unwrap(), "--seed", "11", "--replications", "2", "--taus", "0.05,0.95"])
        .arg("--out-dir")
        .arg(dir)
        .env("PANELVAR_THREADS", threads)
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    if !(run_study_binary(&a, "1") && run_study_binary(&b, "2")) {
        return outcome(false, "study run failed");
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let differing: Vec<String> = names
        .iter()
        .filter(|n| fs::read(a.join(n)).ok() != fs::read(b.join(n)).ok())
        .map(|n| n.to_string_lossy().into_owned())
        .collect();
    let same_listing = fs::read_dir(&b).unwrap().count() == names.len();
    outcome(
        differing.is_empty() && same_listing && names.len() >= 6,
        format!("{} files compared across 1 and 2 worker threads, differing: {differing:?}", names.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("estimator identities", criterion_1),
        ("quantile regression solver", criterion_2),
        ("in-sample coefficients", criterion_3),
        ("coverage and DQ", criterion_4),
        ("DM dominance over RiskMetrics", criterion_5),
        ("GMVaR closed form and ordering", criterion_6),
        ("frontier QP", criterion_7),
        ("backtest machinery", criterion_8),
        ("determinism", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        println!("criterion {} {name}: {}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
