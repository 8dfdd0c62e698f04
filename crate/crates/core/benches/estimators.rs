//! Trial-level and grid-level throughput, one worker against the full pool.
//!
//! Build with `--no-default-features` to time the purely sequential code
//! path; the `workers = 1` rows then match the pool rows.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use nearfield::channel::synthesize_snapshot;
use nearfield::harness::config::{BoundSelection, GeometryConfig, PartitionConfig, Spacing};
use nearfield::harness::{run_experiment, ExperimentConfig, Method, Sampled};
use nearfield::omp::Window;
use nearfield::{omp_estimate, par, ArrayGeometry, ComplexGain, PolarGrid, PolarPoint, UeLocation};

fn trials_config(workers: Option<usize>) -> ExperimentConfig {
    ExperimentConfig {
        geometry: GeometryConfig {
            n_x: 50,
            n_y: 50,
            spacing: Spacing::Wavelengths(0.25),
            frequency_hz: 1e10,
        },
        partition: PartitionConfig { m_x: 5, m_y: 5 },
        r: Sampled::Fixed(3.0),
        trials: 8,
        methods: vec![Method::Aple],
        bounds: BoundSelection { crb: false, mcrb: false },
        record_runtime: false,
        workers,
        ..ExperimentConfig::default()
    }
}

fn aple_trials(c: &mut Criterion) {
    let mut group = c.benchmark_group("aple_trials");
    group.sample_size(10);
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    for (label, workers) in [("sequential", Some(1)), ("parallel", None)] {
        let cfg = trials_config(workers);
        group.bench_with_input(BenchmarkId::new(label, all), &cfg, |b, cfg| {
            b.iter(|| black_box(run_experiment(cfg).unwrap()))
        });
    }
    group.finish();
}

fn omp_scan(c: &mut Criterion) {
    let geom = ArrayGeometry::square(50, 0.0075, 0.03).unwrap();
    let q = PolarPoint::new(3.0, 1.0, 0.6);
    let snap = synthesize_snapshot(&geom, &UeLocation::from_polar(q).unwrap(), ComplexGain::from_polar(1.0, 0.0), 0.01, 1)
        .unwrap();
    let grid = PolarGrid::windowed(
        0.5,
        10.0,
        Some(Window { lo: 2.5, hi: 3.5 }),
        Some(Window { lo: 0.8, hi: 1.2 }),
        Some(Window { lo: 0.4, hi: 0.8 }),
    )
    .unwrap();
    let mut group = c.benchmark_group("omp_scan");
    group.sample_size(10);
    for (label, workers) in [("sequential", Some(1)), ("parallel", None)] {
        group.bench_function(BenchmarkId::new(label, grid.len()), |b| {
            b.iter(|| par::with_workers(workers, || black_box(omp_estimate(&snap, &geom, &grid).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, aple_trials, omp_scan);
criterion_main!(benches);
