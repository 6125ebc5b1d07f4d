//! Compares the rayon batch against the sequential fallback on the Monte
//! Carlo cost estimator. Run with `cargo bench -p pdc-core`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use pdc_core::lq::{solve_f_system, CrossFactor, LQParams, SolverGrid};
use pdc_core::sim::{batch, batch_sequential, path_rng, run_path, FeedbackPolicy, SimConfig};

fn params() -> LQParams {
    LQParams {
        q: 1.0,
        eps: 2.0,
        c: 0.0,
        horizon: 1.0,
        tau: 0.05,
        sigma: 1.0,
    }
}

fn bench_batches(c: &mut Criterion) {
    let p = params();
    let grid = SolverGrid::with_tau_steps(&p, 10).unwrap();
    let surfaces = solve_f_system(&p, &grid, CrossFactor::One).unwrap();
    let policy = FeedbackPolicy {
        surfaces: &surfaces,
    };
    let cfg = SimConfig {
        n_paths: 0,
        seed: 7,
        dt_sim: grid.dt,
        y0: 1.0,
        z_hist: None,
    };
    let (steps, _) = SimConfig { n_paths: 1, ..cfg.clone() }.layout(&p).unwrap();

    let per_path = |i: usize| {
        let mut rng = path_rng(7, i);
        let run = run_path(&policy, &p, &SimConfig { n_paths: 1, ..cfg.clone() }, steps, &mut rng)?;
        Ok(run.running_cost)
    };

    let mut group = c.benchmark_group("monte_carlo_batch");
    for n_paths in [256usize, 1024, 4096] {
        group.throughput(Throughput::Elements(n_paths as u64));
        group.bench_with_input(
            BenchmarkId::new("sequential", n_paths),
            &n_paths,
            |b, &n| b.iter(|| black_box(batch_sequential(n, per_path).unwrap())),
        );
        group.bench_with_input(BenchmarkId::new("parallel", n_paths), &n_paths, |b, &n| {
            b.iter(|| black_box(batch(n, per_path).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_batches);
criterion_main!(benches);
