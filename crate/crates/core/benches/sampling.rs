use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cvar_mlmc::errors::{estimate_errors, ErrorSettings};
use cvar_mlmc::estimator::{pointwise_from_batches, sample_hierarchy};
use cvar_mlmc::exec::Execution;
use cvar_mlmc::fhn::{FhnModel, FhnParams, Z_REF};
use cvar_mlmc::model::{sample_level, Design};
use cvar_mlmc::spline::ThetaGrid;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn fhn_sampling(c: &mut Criterion) {
    let model = FhnModel::new(FhnParams::default()).unwrap();
    let z = Design::new(Z_REF.to_vec()).unwrap();
    let mut group = c.benchmark_group("fhn_sample_level4_x256");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sample_level(&model, &z, 4, 0, 256, 7, 0, exec).unwrap())
        });
    }
    group.finish();
}

fn pointwise_sums(c: &mut Criterion) {
    let model = FhnModel::new(FhnParams::default()).unwrap();
    let z = Design::new(Z_REF.to_vec()).unwrap();
    let batches = sample_hierarchy(&model, &z, &[4096, 1024, 256], 7, 0, Execution::Parallel).unwrap();
    let grid = ThetaGrid::new(2.0, 3.5, 257).unwrap();
    let mut group = c.benchmark_group("pointwise_n257");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pointwise_from_batches(&batches, &grid, 0.7, exec).unwrap())
        });
    }
    group.finish();
}

fn bootstrap_errors(c: &mut Criterion) {
    let model = FhnModel::new(FhnParams::default()).unwrap();
    let z = Design::new(Z_REF.to_vec()).unwrap();
    let batches = sample_hierarchy(&model, &z, &[512, 128, 32], 7, 0, Execution::Parallel).unwrap();
    let grid = ThetaGrid::new(2.0, 3.5, 65).unwrap();
    let est = cvar_mlmc::estimator::functionals_from_batches(batches, &grid, &z, 0.7, Execution::Parallel).unwrap();
    let settings = ErrorSettings::default();
    let mut group = c.benchmark_group("error_estimates");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| estimate_errors(&est, 2.0, &settings, 7, 0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, fhn_sampling, pointwise_sums, bootstrap_errors);
criterion_main!(benches);
