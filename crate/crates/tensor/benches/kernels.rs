//! Parallel vs sequential kernel timings. Run with `cargo bench -p reenact-tensor`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use reenact_tensor::kernels::{self, ConvDims};

fn conv_case(batch: usize, ch: usize, hw: usize) -> (Vec<f32>, Vec<f32>, ConvDims) {
    let d = ConvDims {
        batch,
        c_in: ch,
        h: hw,
        w: hw,
        c_out: ch,
        kh: 3,
        kw: 3,
        pad: 1,
        per_sample: false,
    };
    let x: Vec<f32> = (0..batch * ch * hw * hw).map(|i| (i % 17) as f32 * 0.1 - 0.8).collect();
    let w: Vec<f32> = (0..ch * ch * 9).map(|i| (i % 13) as f32 * 0.05 - 0.3).collect();
    (x, w, d)
}

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for &(batch, ch, hw) in &[(4usize, 64usize, 32usize), (1, 128, 16)] {
        let (x, w, d) = conv_case(batch, ch, hw);
        let mut out = vec![0.0f32; d.out_len()];
        let label = format!("{batch}x{ch}x{hw}");
        group.bench_with_input(BenchmarkId::new("parallel", &label), &d, |b, d| {
            b.iter(|| kernels::conv2d(&x, &w, d, &mut out));
        });
        group.bench_with_input(BenchmarkId::new("sequential", &label), &d, |b, d| {
            b.iter(|| kernels::conv2d_seq(&x, &w, d, &mut out));
        });
        let gout = vec![1.0f32; d.out_len()];
        let mut gw = vec![0.0f32; ch * ch * 9];
        group.bench_with_input(BenchmarkId::new("grad_weight_parallel", &label), &d, |b, d| {
            b.iter(|| kernels::conv2d_grad_weight(&x, &gout, d, &mut gw));
        });
        group.bench_with_input(BenchmarkId::new("grad_weight_sequential", &label), &d, |b, d| {
            b.iter(|| kernels::conv2d_grad_weight_seq(&x, &gout, d, &mut gw));
        });
    }
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let (m, k, n) = (64usize, 512usize, 512usize);
    let a: Vec<f32> = (0..m * k).map(|i| (i % 11) as f32 * 0.1).collect();
    let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 * 0.1).collect();
    let mut out = vec![0.0f32; m * n];
    group.bench_function("parallel", |bch| {
        bch.iter(|| kernels::matmul(&a, &b, m, k, n, &mut out));
    });
    group.bench_function("sequential", |bch| {
        bch.iter(|| kernels::matmul_seq(&a, &b, m, k, n, &mut out));
    });
    group.finish();
}

criterion_group!(benches, bench_conv, bench_matmul);
criterion_main!(benches);
