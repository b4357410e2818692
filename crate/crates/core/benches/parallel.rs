//! Sequential vs rayon execution of the data-parallel sites. Without the
//! `parallel` feature both variants run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use forcempc::contact::{ForceModel, HookModel};
use forcempc::gp::{build_posterior, fit_hyperparams_with, Dataset, FitOptions, KernelConfig};
use forcempc::ocp::{default_sigma_region, sigma_max_over_region};
use forcempc::par::Exec;
use forcempc::simloop::{generate_training_data, run_batch, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn dataset(n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let y: Vec<f64> = rows.iter().map(|x| (2.0 * x[0]).sin() + x[1] * x[2] + 0.05 * rng.random_range(-1.0..1.0)).collect();
    Dataset::from_rows(&rows, &y, 0.0).unwrap()
}

fn gp_restarts(c: &mut Criterion) {
    let data = dataset(64);
    let mut g = c.benchmark_group("gp_restarts");
    g.sample_size(10);
    for (name, exec) in MODES {
        let opts = FitOptions { restarts: 8, seed: 1, exec, ..FitOptions::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| fit_hyperparams_with(&data, &opts).unwrap()));
    }
    g.finish();
}

fn sigma_grid(c: &mut Criterion) {
    let gp = build_posterior(&dataset(64), &KernelConfig::new(1.0, vec![0.4; 3]), 1e-3).unwrap();
    let grid = default_sigma_region(&gp, 1.0, 9);
    let mut g = c.benchmark_group("sigma_max_grid");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| sigma_max_over_region(&gp, &grid, exec).unwrap()));
    }
    g.finish();
}

fn short_scenario() -> Scenario {
    let mut s = Scenario::default();
    s.sim.duration = 0.5;
    s.data.runs = 2;
    s.data.eval_runs = 2;
    s.data.duration = 0.5;
    s
}

fn closed_loop_batch(c: &mut Criterion) {
    let s = short_scenario();
    let truth = s.truth.build().unwrap();
    let jobs: Vec<(Scenario, ForceModel)> = [300.0, 400.0, 500.0, 600.0]
        .iter()
        .map(|&k_e| (s.clone(), ForceModel::Hook(HookModel { k_e })))
        .collect();
    let mut g = c.benchmark_group("closed_loop_batch");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_batch(&jobs, &truth, exec)));
    }
    g.finish();
}

fn data_collection(c: &mut Criterion) {
    let s = short_scenario();
    let truth = s.truth.build().unwrap();
    let mut g = c.benchmark_group("data_collection");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| generate_training_data(&s, &truth, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, gp_restarts, sigma_grid, closed_loop_batch, data_collection);
criterion_main!(benches);
