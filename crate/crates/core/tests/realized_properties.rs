use nalgebra::DMatrix;
use panelvar_core::realized::{
    bipower_variation, compute_measures, correlation_from_covariance, jump_variation, realized_covariance,
    realized_semivariances, realized_variance,
};
use panelvar_core::simulate::{simulate_paths, ErrorDist, SimConfig};
use panelvar_core::{daily_returns, AssetMeasures};
use proptest::prelude::*;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn flat(config: SimConfig) -> SimConfig {
    SimConfig { gamma: 0.0, jump_intensity: 0.0, error_dist: ErrorDist::Normal, ..config }
}

proptest! {
    #[test]
    fn semivariances_recompose_rv(r in prop::collection::vec(-0.05f64..0.05, 3..400)) {
        let rv = realized_variance(&r);
        let (plus, minus) = realized_semivariances(&r);
        prop_assert!(plus >= 0.0 && minus >= 0.0);
        prop_assert!(rel_close(rv, plus + minus, 1e-12) || rv == 0.0);
    }

    #[test]
    fn jump_variation_is_bounded(r in prop::collection::vec(-0.05f64..0.05, 3..400)) {
        let m = AssetMeasures::from_returns(&r).unwrap();
        prop_assert!(m.jv >= 0.0);
        prop_assert!(m.jv <= m.rv);
        prop_assert!(m.bpv >= 0.0);
        prop_assert_eq!(m.jv, jump_variation(m.rv, m.bpv));
    }

    #[test]
    fn measures_scale_quadratically(r in prop::collection::vec(-0.05f64..0.05, 3..200), c in 0.1f64..10.0) {
        let base = AssetMeasures::from_returns(&r).unwrap();
        let scaled: Vec<f64> = r.iter().map(|x| c * x).collect();
        let s = AssetMeasures::from_returns(&scaled).unwrap();
        let c2 = c * c;
        for (a, b) in [(base.rv, s.rv), (base.rs_plus, s.rs_plus), (base.rs_minus, s.rs_minus), (base.bpv, s.bpv)] {
            prop_assert!((a * c2 - b).abs() <= 1e-10 * b.abs().max(1e-300));
        }
        prop_assert!((base.jv * c2 - s.jv).abs() <= 1e-9 * s.rv.max(1e-300));
    }

    #[test]
    fn covariance_and_correlation_invariants(
        n in 2usize..6,
        len in 3usize..120,
        seed in prop::collection::vec(-0.03f64..0.03, 720),
    ) {
        let returns: Vec<Vec<f64>> = (0..n).map(|a| (0..len).map(|k| seed[(a * len + k) % seed.len()] + 1e-4 * a as f64).collect()).collect();
        let cov = realized_covariance(&returns).unwrap();
        for i in 0..n {
            prop_assert!(rel_close(cov[(i, i)], realized_variance(&returns[i]), 1e-12));
            for j in 0..n {
                prop_assert_eq!(cov[(i, j)], cov[(j, i)]);
            }
        }
        let corr = correlation_from_covariance(&cov).unwrap();
        for i in 0..n {
            prop_assert_eq!(corr[(i, i)], 1.0);
            for j in 0..n {
                prop_assert!(corr[(i, j)].abs() <= 1.0 + 1e-12);
            }
        }
    }
}

#[test]
fn simulated_days_satisfy_identities() {
    let cfg = SimConfig { days: 300, n_assets: 4, jump_intensity: 0.5, seed: 3, ..SimConfig::default() };
    let out = simulate_paths(&cfg, None).unwrap();
    for day in compute_measures(&out.panel).unwrap() {
        for m in &day.assets {
            assert!(rel_close(m.rv, m.rs_plus + m.rs_minus, 1e-12));
            assert!(m.jv >= 0.0 && m.jv <= m.rv);
        }
        let corr = correlation_from_covariance(&day.cov).unwrap();
        for i in 0..corr.nrows() {
            assert_eq!(corr[(i, i)], 1.0);
            for j in 0..corr.ncols() {
                assert!(corr[(i, j)].abs() <= 1.0 + 1e-12);
                assert!((corr[(i, j)] - corr[(j, i)]).abs() == 0.0);
            }
        }
    }
}

#[test]
fn intraday_returns_sum_to_daily_return() {
    let cfg = SimConfig { days: 50, n_assets: 3, seed: 8, ..SimConfig::default() };
    let out = simulate_paths(&cfg, None).unwrap();
    let daily = daily_returns(&out.panel).unwrap();
    for d in 0..out.panel.n_days() {
        for a in 0..out.panel.n_assets() {
            let s: f64 = out.panel.intraday_returns(d, a).iter().sum();
            assert!((s - daily.returns[(d, a)]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_mean_daily_returns() {
    let cfg = SimConfig { days: 2613, n_assets: 1, intraday_steps: 60, error_dist: ErrorDist::Normal, seed: 21, ..SimConfig::default() };
    let out = simulate_paths(&cfg, None).unwrap();
    let r: Vec<f64> = daily_returns(&out.panel).unwrap().returns.column(0).iter().copied().collect();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let sd = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean} se {}", sd / n.sqrt());
}

#[test]
fn rv_tracks_integrated_variance_under_constant_volatility() {
    let cfg = flat(SimConfig { days: 500, n_assets: 1, seed: 4, ..SimConfig::default() });
    let out = simulate_paths(&cfg, None).unwrap();
    let measures = compute_measures(&out.panel).unwrap();
    let daily_iv = cfg.alpha / cfg.days_per_year;
    let mean_rv = measures.iter().map(|d| d.assets[0].rv).sum::<f64>() / measures.len() as f64;
    assert!((mean_rv / daily_iv - 1.0).abs() < 0.15, "mean RV {mean_rv} vs IV {daily_iv}");
    let mean_ledger = out.true_iv.iter().map(|d| d[0]).sum::<f64>() / out.true_iv.len() as f64;
    assert!((mean_ledger / daily_iv - 1.0).abs() < 1e-9);
}

#[test]
fn bipower_matches_rv_without_jumps() {
    let cfg = SimConfig { days: 500, n_assets: 1, jump_intensity: 0.0, error_dist: ErrorDist::Normal, seed: 5, ..SimConfig::default() };
    let out = simulate_paths(&cfg, None).unwrap();
    let measures = compute_measures(&out.panel).unwrap();
    let ratio = measures.iter().map(|d| d.assets[0].bpv / d.assets[0].rv).sum::<f64>() / measures.len() as f64;
    assert!((0.9..=1.1).contains(&ratio), "BPV/RV {ratio}");
}

#[test]
fn injected_jump_shows_up_in_jump_variation() {
    let cfg = flat(SimConfig { days: 500, n_assets: 1, seed: 6, ..SimConfig::default() });
    let out = simulate_paths(&cfg, None).unwrap();
    let jump = 0.02;
    let mut total = 0.0;
    for d in 0..out.panel.n_days() {
        let mut r = out.panel.intraday_returns(d, 0);
        let k = (d * 37) % r.len();
        r[k] += jump;
        let rv = realized_variance(&r);
        total += jump_variation(rv, bipower_variation(&r).unwrap());
    }
    let mean = total / out.panel.n_days() as f64;
    assert!((mean / (jump * jump) - 1.0).abs() < 0.2, "mean JV {mean}");
}

#[test]
fn realized_covariance_recovers_generator_sigma() {
    let sigma = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 1.2, 0.3, 0.2, 0.3, 0.8]);
    let cfg = SimConfig { error_dist: ErrorDist::Mvn, ..flat(SimConfig { days: 500, n_assets: 3, seed: 7, ..SimConfig::default() }) };
    let path = vec![sigma.clone(); cfg.days];
    let out = simulate_paths(&cfg, Some(&path)).unwrap();
    let measures = compute_measures(&out.panel).unwrap();
    let mut mean = DMatrix::zeros(3, 3);
    for d in &measures {
        mean += &d.cov;
    }
    mean /= measures.len() as f64;
    let expected = &sigma * (cfg.alpha / cfg.days_per_year);
    let err = (&mean - &expected).norm() / expected.norm();
    assert!(err < 0.1, "Frobenius relative error {err}");
}
