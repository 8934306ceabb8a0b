use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mfflow_bench::reference;
use mfflow_core::{solve_directional, solve_fp, solve_kernel, value_report};

fn fp(c: &mut Criterion) {
    let s = reference(1001, 1000, 1);
    let cfg = s.fp_config();
    c.bench_function("fp_solve_1001x1000", |b| {
        b.iter(|| solve_fp(&s.model, black_box(&s.mu), s.t(), s.horizon(), &cfg).unwrap())
    });
    let path = solve_fp(&s.model, &s.mu, s.t(), s.horizon(), &cfg).unwrap();
    c.bench_function("directional_1001x1000", |b| {
        b.iter(|| solve_directional(&s.model, &path, black_box(&s.directions[0]), &cfg).unwrap())
    });
}

fn kernel(c: &mut Criterion) {
    let s = reference(201, 200, 1);
    let cfg = s.fp_config();
    let path = solve_fp(&s.model, &s.mu, s.t(), s.horizon(), &cfg).unwrap();
    let mut group = c.benchmark_group("kernel");
    group.sample_size(10);
    group.bench_function("solve_kernel_201x200", |b| {
        b.iter(|| solve_kernel(&s.model, black_box(&path), &cfg, 200).unwrap())
    });
    group.finish();
}

fn pathwise(c: &mut Criterion) {
    let s = reference(201, 200, 2000);
    let cfg = s.value_settings();
    let mut group = c.benchmark_group("value");
    group.sample_size(10);
    group.bench_function("value_report_2000_paths", |b| {
        b.iter(|| value_report(&s.model, &s.phi, s.t(), black_box(s.x0()), &s.mu, &cfg, &s.directions).unwrap())
    });
    group.finish();
}

criterion_group!(benches, fp, kernel, pathwise);
criterion_main!(benches);
