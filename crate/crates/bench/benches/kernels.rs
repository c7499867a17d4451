use std::hint::black_box;

use cdt_bench::matrix;
use cdt_core::ops::{layer_norm, matmul, softmax};
use cdt_core::stats::{fisher_exact_haldane, hypergeom_sf, Table2x2};
use cdt_core::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for &(m, k, n) in &[(64, 96, 32), (200, 32, 32), (200, 32, 200)] {
        let a = matrix(m, k, 1);
        let b = matrix(k, n, 2);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{m}x{k}x{n}")), &(a, b), |bch, (a, b)| {
            bch.iter(|| matmul(black_box(a), black_box(b)).unwrap())
        });
    }
    g.finish();
}

fn bench_rowwise(c: &mut Criterion) {
    let x = matrix(200, 200, 3);
    c.bench_function("softmax 200x200", |b| b.iter(|| softmax(black_box(&x), 1).unwrap()));
    let h = matrix(200, 32, 4);
    let gamma = Tensor::from_fn(vec![32], |_| 1.0f32);
    let beta = Tensor::zeros(vec![32]);
    c.bench_function("layer_norm 200x32", |b| {
        b.iter(|| layer_norm(black_box(&h), &gamma, &beta, 1e-5).unwrap())
    });
}

fn bench_stats(c: &mut Criterion) {
    c.bench_function("hypergeom_sf G=2361 N=100", |b| {
        b.iter(|| hypergeom_sf(black_box(28), 2361, 100, 100).unwrap())
    });
    c.bench_function("fisher 64 bins", |b| {
        b.iter(|| fisher_exact_haldane(black_box(Table2x2::new(4, 2, 3, 55))).unwrap())
    });
}

criterion_group!(benches, bench_matmul, bench_rowwise, bench_stats);
criterion_main!(benches);
