#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dwsep_bench::randn;
use dwsep_core::layers::{
    batchnorm_forward, conv2d_forward, depthwise_backward, depthwise_forward, pointwise_backward,
    pointwise_forward, BatchNormParams, DepthwiseFilter, Mode, PointwiseFilter, StandardFilter,
};

/// (channels, resolution) of the three desk macro blocks at batch 64.
const STAGES: [(usize, usize); 3] = [(16, 32), (32, 16), (64, 8)];

fn depthwise(c: &mut Criterion) {
    let mut g = c.benchmark_group("depthwise");
    for (ch, r) in STAGES {
        let x = randn(&[64, ch, r, r], 1);
        let w = randn(&[3, 3, ch], 2);
        let f = DepthwiseFilter::new(&w).unwrap();
        let gy = randn(&[64, ch, r, r], 3);
        g.bench_with_input(BenchmarkId::new("forward", ch), &ch, |b, _| {
            b.iter(|| depthwise_forward(&x, &f, 1).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("backward", ch), &ch, |b, _| {
            b.iter(|| depthwise_backward(&x, &f, 1, &gy, true, true).unwrap())
        });
    }
    g.finish();
}

fn pointwise(c: &mut Criterion) {
    let mut g = c.benchmark_group("pointwise");
    for (ch, r) in STAGES {
        let x = randn(&[64, ch, r, r], 4);
        let w = randn(&[ch, ch], 5);
        let f = PointwiseFilter::new(&w).unwrap();
        let gy = randn(&[64, ch, r, r], 6);
        g.bench_with_input(BenchmarkId::new("forward", ch), &ch, |b, _| {
            b.iter(|| pointwise_forward(&x, &f).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("backward", ch), &ch, |b, _| {
            b.iter(|| pointwise_backward(&x, &f, &gy, true, true).unwrap())
        });
    }
    g.finish();
}

fn stem_and_norm(c: &mut Criterion) {
    let x = randn(&[64, 3, 32, 32], 7);
    let w = randn(&[3, 3, 3, 16], 8);
    let f = StandardFilter::new(&w).unwrap();
    c.bench_function("stem_conv_forward", |b| {
        b.iter(|| conv2d_forward(&x, &f, 1).unwrap())
    });
    let h = randn(&[64, 16, 32, 32], 9);
    c.bench_function("batchnorm_train_forward", |b| {
        b.iter(|| {
            let mut p = BatchNormParams::new(16);
            batchnorm_forward(&h, &mut p, Mode::Train).unwrap()
        })
    });
}

criterion_group!(benches, depthwise, pointwise, stem_and_norm);
criterion_main!(benches);
