use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use jumpbsde::levy::{build_partition, LevyMeasure};
use jumpbsde::models::martingale_model;
use jumpbsde::nn::Mlp;
use jumpbsde::paths::{generate_increments, simulate_forward, TimeGrid};
use jumpbsde::rng::{stream, Purpose};
use jumpbsde::solver::{precompute_source, residual_f, JumpQuadrature, StepNetworks};
use ndarray::Array2;

fn partition_build(c: &mut Criterion) {
    let m = LevyMeasure::symmetric_power_law(1, 1.0, 1.2, 1.0).unwrap();
    let mut g = c.benchmark_group("build_partition");
    for h in [1.0, 0.5, 0.25] {
        g.bench_with_input(BenchmarkId::from_parameter(h), &h, |b, &h| {
            b.iter(|| build_partition(&m, 0.01, h, 1.0, |e: &[f64]| e[0].abs().min(1.0)).unwrap())
        });
    }
    g.finish();
}

fn path_simulation(c: &mut Criterion) {
    let m = LevyMeasure::symmetric_power_law(1, 1.0, 0.5, 1.0).unwrap();
    let part = build_partition(&m, 0.05, 0.5, 1.0, |e: &[f64]| e[0].abs().min(1.0)).unwrap();
    let model = martingale_model(&m, 0.3, true);
    let grid = TimeGrid::uniform(1.0, 20).unwrap();
    let mut g = c.benchmark_group("paths");
    g.sample_size(20);
    g.bench_function("increments_1024x20", |b| b.iter(|| generate_increments(&grid, &part, 1, 1, 1024, black_box(7)).unwrap()));
    g.bench_function("simulate_1024x20", |b| b.iter(|| simulate_forward(&model, &grid, &part, &[1.0], 1024, black_box(7)).unwrap()));
    g.finish();
}

fn network_passes(c: &mut Criterion) {
    let mut rng = stream(1, Purpose::Test, 0);
    let net = Mlp::he_init(&[2, 22, 22, 1], &mut rng).unwrap();
    let x = Array2::from_shape_fn((512, 2), |(r, k)| (r as f64 * 0.01 - 2.0) * (k as f64 + 1.0));
    let cot = Array2::from_elem((512, 1), 1.0);
    c.bench_function("mlp_forward_512", |b| b.iter(|| net.forward(black_box(x.view()))));
    c.bench_function("mlp_grad_512", |b| b.iter(|| net.grad(black_box(x.view()), cot.view()).unwrap()));
}

fn residual(c: &mut Criterion) {
    let m = LevyMeasure::symmetric_power_law(1, 1.0, 0.5, 1.0).unwrap();
    let part = build_partition(&m, 0.05, 0.5, 1.0, |e: &[f64]| e[0].abs().min(1.0)).unwrap();
    let model = martingale_model(&m, 0.3, true);
    let paths = simulate_forward(&model, &TimeGrid::uniform(1.0, 4).unwrap(), &part, &[1.0], 2048, 3).unwrap();
    let quad = JumpQuadrature::new(&model, &part, &paths.sigma_sqrt);
    let nets = StepNetworks::he_init(1, 1, true, 2, 21, 3, 0).unwrap();
    let source = precompute_source(&model, &paths).unwrap();
    c.bench_function("residual_f_2048", |b| b.iter(|| residual_f(1, &paths, &nets, &model, &quad, &source)));
}

criterion_group!(benches, partition_build, path_simulation, network_passes, residual);
criterion_main!(benches);
