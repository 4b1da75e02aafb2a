use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use panelvar_core::backtest::{dq_test, hits};
use panelvar_core::models::build_design;
use panelvar_core::realized::compute_measures;
use panelvar_core::simulate::{simulate_paths, SimConfig};
use panelvar_core::{daily_returns, fit, ModelData, ModelKind, ModelSpec};

fn small_panel() -> SimConfig {
    SimConfig { days: 300, n_assets: 5, intraday_steps: 84, seed: 1, ..SimConfig::default() }
}

fn simulation(c: &mut Criterion) {
    let cfg = small_panel();
    c.bench_function("simulate 300 days x 5 assets", |b| b.iter(|| simulate_paths(black_box(&cfg), None).unwrap()));
}

fn measures(c: &mut Criterion) {
    let panel = simulate_paths(&small_panel(), None).unwrap().panel;
    c.bench_function("realized measures 300 days x 5 assets", |b| b.iter(|| compute_measures(black_box(&panel)).unwrap()));
}

fn panel_fit(c: &mut Criterion) {
    let panel = simulate_paths(&small_panel(), None).unwrap().panel;
    let data = ModelData::new(daily_returns(&panel).unwrap(), compute_measures(&panel).unwrap()).unwrap();
    let mut group = c.benchmark_group("pqr-rv fit");
    for tau in [0.05, 0.5] {
        let spec = ModelSpec::new(ModelKind::PqrRv, 1, vec![tau]).unwrap();
        let problem = build_design(&spec, &data, tau, 0.0).unwrap();
        group.bench_function(format!("tau {tau}"), |b| b.iter(|| fit(black_box(&problem)).unwrap()));
    }
    group.finish();
}

fn dq(c: &mut Criterion) {
    let t = 1600;
    let forecasts: Vec<f64> = (0..t).map(|k| -1.645 * (1.0 + 0.3 * (k as f64 / 40.0).sin())).collect();
    let returns: Vec<f64> = (0..t).map(|k| ((k * 7919) % 1000) as f64 / 250.0 - 2.0).collect();
    let h = hits(&returns, &forecasts).unwrap();
    c.bench_function("dq test 1600 days, 99 draws", |b| b.iter(|| dq_test(black_box(&h), &forecasts, 0.05, 4, 99, 3).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = simulation, measures, panel_fit, dq
}
criterion_main!(benches);
