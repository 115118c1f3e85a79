use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lct_bench::filler;
use lct_core::tensor::kernels::{conv2d, matmul, matmul_nt, matmul_tn, max_pool2d, softmax_cross_entropy, ConvGeometry};
use std::hint::black_box;

fn dense(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for &(m, k, n) in &[(128, 784, 300), (128, 300, 150), (32, 64, 256)] {
        let a = filler(m * k, 1);
        let b = filler(k * n, 2);
        let d = filler(m * n, 3);
        let id = format!("{m}x{k}x{n}");
        g.bench_with_input(BenchmarkId::new("forward", &id), &(), |bch, _| bch.iter(|| matmul(black_box(&a), black_box(&b), m, k, n)));
        g.bench_with_input(BenchmarkId::new("grad_weights", &id), &(), |bch, _| bch.iter(|| matmul_tn(black_box(&a), black_box(&d), m, k, n)));
        g.bench_with_input(BenchmarkId::new("grad_inputs", &id), &(), |bch, _| bch.iter(|| matmul_nt(black_box(&d), black_box(&b), m, n, k)));
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let input = [32, 1, 28, 28];
    let kernel = [8, 1, 3, 3];
    let geom = ConvGeometry::new(&input, &kernel, 1, 1).unwrap();
    let x = filler(input.iter().product(), 4);
    let w = filler(kernel.iter().product(), 5);
    c.bench_function("conv2d 32x1x28x28 k8x3x3", |b| b.iter(|| conv2d(black_box(&x), black_box(&w), &geom)));

    let shape = [32, 8, 28, 28];
    let y = filler(shape.iter().product(), 6);
    c.bench_function("max_pool2d 32x8x28x28 /2", |b| b.iter(|| max_pool2d(black_box(&y), &shape, 2)));
}

fn loss(c: &mut Criterion) {
    let (rows, cols) = (128, 10);
    let logits = filler(rows * cols, 8);
    let targets: Vec<usize> = (0..rows).map(|i| i % cols).collect();
    c.bench_function("softmax_cross_entropy 128x10", |b| {
        b.iter(|| softmax_cross_entropy(black_box(&logits), rows, cols, &targets))
    });
}

criterion_group!(benches, dense, conv, loss);
criterion_main!(benches);
