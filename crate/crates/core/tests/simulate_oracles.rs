use nalgebra::DMatrix;
use panelvar_core::realized::compute_measures;
use panelvar_core::simulate::{multivariate_innovations, simulate_paths, ErrorDist, SimConfig};

fn sample_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let means = x.row_mean();
    let mut c = DMatrix::zeros(x.ncols(), x.ncols());
    for row in x.row_iter() {
        let d = row - &means;
        c += d.transpose() * d;
    }
    c / (n - 1.0)
}

#[test]
fn deterministic_variance_follows_the_ode() {
    let cfg = SimConfig {
        gamma: 0.0,
        jump_intensity: 0.0,
        error_dist: ErrorDist::Normal,
        initial_variance: 0.09,
        days: 60,
        n_assets: 1,
        seed: 1,
        ..SimConfig::default()
    };
    let out = simulate_paths(&cfg, None).unwrap();
    let day = 1.0 / cfg.days_per_year;
    for d in 0..cfg.days {
        let (t0, t1) = (d as f64 * day, (d + 1) as f64 * day);
        let exact = cfg.alpha * day
            + (cfg.initial_variance - cfg.alpha) * ((-cfg.kappa * t0).exp() - (-cfg.kappa * t1).exp()) / cfg.kappa;
        let ledger = out.true_iv[d][0];
        assert!((ledger / exact - 1.0).abs() < 1e-3, "day {d}: {ledger} vs {exact}");
    }
}

#[test]
fn zero_intensity_means_no_jumps() {
    let cfg = SimConfig { jump_intensity: 0.0, days: 400, n_assets: 2, seed: 2, ..SimConfig::default() };
    let out = simulate_paths(&cfg, None).unwrap();
    assert!(out.jumps.iter().flatten().all(|j| j.is_empty()));
    let measures = compute_measures(&out.panel).unwrap();
    let (mut diff, mut rv) = (0.0, 0.0);
    for day in &measures {
        for m in &day.assets {
            diff += m.rv - m.bpv;
            rv += m.rv;
        }
    }
    assert!((diff / rv).abs() < 0.05, "mean (RV-BPV)/RV {}", diff / rv);
}

#[test]
fn jump_counts_match_intensity_and_ledger() {
    let cfg = SimConfig { jump_intensity: 0.3, days: 2000, n_assets: 2, intraday_steps: 30, seed: 3, ..SimConfig::default() };
    let out = simulate_paths(&cfg, None).unwrap();
    let count: usize = out.jumps.iter().flatten().map(|j| j.len()).sum();
    let expected = cfg.jump_intensity * (cfg.days * cfg.n_assets) as f64;
    assert!((count as f64 - expected).abs() < 4.0 * expected.sqrt(), "{count} jumps vs {expected}");
    for d in 0..cfg.days {
        for a in 0..cfg.n_assets {
            let ledger: f64 = out.jumps[d][a].iter().map(|j| j.size * j.size).sum();
            assert_eq!(out.true_jv(d, a), ledger);
            assert!(out.true_iv[d][a] >= 0.0);
        }
    }
}

#[test]
fn continuous_quadratic_variation_tracks_iv_ledger() {
    let cfg = SimConfig { days: 300, n_assets: 3, seed: 4, ..SimConfig::default() };
    let out = simulate_paths(&cfg, None).unwrap();
    let mut errs: Vec<f64> = (0..cfg.days)
        .flat_map(|d| (0..cfg.n_assets).map(move |a| (d, a)))
        .map(|(d, a)| (out.continuous_qv[d][a] / out.true_iv[d][a] - 1.0).abs())
        .collect();
    errs.sort_by(f64::total_cmp);
    let median = errs[errs.len() / 2];
    assert!(median < 0.1, "median relative error {median}");
}

#[test]
fn mvn_draws_reproduce_identity() {
    let x = multivariate_innovations(ErrorDist::Mvn, &DMatrix::identity(3, 3), 100_000, 5).unwrap();
    let c = sample_cov(&x);
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((c[(i, j)] - target).abs() < 0.02, "entry ({i},{j}) = {}", c[(i, j)]);
        }
    }
}

#[test]
fn multivariate_draws_track_supplied_correlation() {
    let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.9, -0.4, 0.9, 1.0, 0.1, -0.4, 0.1, 0.5]);
    for dist in [ErrorDist::Mvn, ErrorDist::Mt9] {
        let x = multivariate_innovations(dist, &sigma, 100_000, 6).unwrap();
        let c = sample_cov(&x);
        let factor = if dist == ErrorDist::Mt9 { 9.0 / 7.0 } else { 1.0 };
        for i in 0..3 {
            assert!((c[(i, i)] / (sigma[(i, i)] * factor) - 1.0).abs() < 0.05);
            for j in 0..3 {
                let rho = c[(i, j)] / (c[(i, i)] * c[(j, j)]).sqrt();
                let target = sigma[(i, j)] / (sigma[(i, i)] * sigma[(j, j)]).sqrt();
                assert!((rho - target).abs() < 0.05, "{dist:?} ({i},{j}): {rho} vs {target}");
            }
        }
    }
}

#[test]
fn univariate_t9_kurtosis() {
    let x = multivariate_innovations(ErrorDist::T9, &DMatrix::identity(1, 1), 1_000_000, 7).unwrap();
    let v: Vec<f64> = x.column(0).iter().copied().collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n;
    let m4 = v.iter().map(|z| (z - mean).powi(4)).sum::<f64>() / n;
    let kurtosis = m4 / (m2 * m2);
    assert!((kurtosis - 4.2).abs() < 0.2, "kurtosis {kurtosis}");
    assert!((m2 - 9.0 / 7.0).abs() < 0.02);
}

#[test]
fn same_seed_gives_identical_draws_and_paths() {
    let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
    assert_eq!(
        multivariate_innovations(ErrorDist::Mt9, &s, 500, 9).unwrap(),
        multivariate_innovations(ErrorDist::Mt9, &s, 500, 9).unwrap()
    );
    let cfg = SimConfig { days: 20, n_assets: 2, seed: 10, replication: 3, ..SimConfig::default() };
    let a = simulate_paths(&cfg, None).unwrap();
    let b = simulate_paths(&cfg, None).unwrap();
    assert_eq!(a.panel, b.panel);
    let other = simulate_paths(&SimConfig { replication: 4, ..cfg }, None).unwrap();
    assert_ne!(a.panel, other.panel);
}

#[test]
fn ledger_csv_has_one_row_per_cell() {
    let cfg = SimConfig { days: 4, n_assets: 2, intraday_steps: 10, seed: 11, ..SimConfig::default() };
    let out = simulate_paths(&cfg, None).unwrap();
    let mut buf = Vec::new();
    out.write_ledger_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "date,asset,true_iv,true_jv");
    assert_eq!(lines.len(), 1 + 4 * 2);
    assert!(lines[1].starts_with("2000-01-03,A01,"));
}
