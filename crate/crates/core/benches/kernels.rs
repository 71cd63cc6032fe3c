//! Parallel dispatch vs. the sequential twins on the four hot kernels.
//!
//! Run with `cargo bench -p fasl-core`. Problem sizes sit well above the
//! kernels' work threshold so the parallel path actually engages; the
//! sequential twins are the exact loops the `parallel` feature falls back to.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};
use fasl_core::kernels::{
    attn_stream, attn_stream_seq, bilinear_up, bilinear_up_seq, conv2d, conv2d_seq, matmul,
    matmul_seq, ConvShape,
};
use fasl_core::Elem;

/// Deterministic non-trivial fill, the same idiom the kernel tests use.
fn wave(n: usize, step: Elem) -> Vec<Elem> {
    (0..n).map(|i| (i as Elem * step).sin()).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let (m, k, n) = (192, 192, 192);
    let a = wave(m * k, 0.37);
    let b = wave(k * n, 0.61);
    let mut out = vec![0.0; m * n];
    let mut g = c.benchmark_group("matmul_192");
    g.bench_function("parallel", |bench| {
        bench.iter(|| matmul(black_box(&a), black_box(&b), &mut out, m, k, n))
    });
    g.bench_function("sequential", |bench| {
        bench.iter(|| matmul_seq(black_box(&a), black_box(&b), &mut out, m, k, n))
    });
    g.finish();
}

fn bench_conv2d(c: &mut Criterion) {
    // A decoder-style 3×3 convolution.
    let s = ConvShape { batch: 1, cin: 16, h: 48, w: 48, cout: 32, k: 3, stride: 1, pad: 1 };
    let x = wave(s.batch * s.cin * s.h * s.w, 0.23);
    let w = wave(s.cout * s.cin * s.k * s.k, 0.71);
    let (ho, wo) = s.out_hw();
    let mut out = vec![0.0; s.batch * s.cout * ho * wo];
    let mut g = c.benchmark_group("conv2d_3x3_16to32_48px");
    g.bench_function("parallel", |bench| {
        bench.iter(|| conv2d(black_box(&x), black_box(&w), None, s, &mut out))
    });
    g.bench_function("sequential", |bench| {
        bench.iter(|| conv2d_seq(black_box(&x), black_box(&w), None, s, &mut out))
    });
    g.finish();

    // The pointwise projection that dominates the feature streams.
    let s = ConvShape { batch: 1, cin: 128, h: 64, w: 64, cout: 32, k: 1, stride: 1, pad: 0 };
    let x = wave(s.batch * s.cin * s.h * s.w, 0.23);
    let w = wave(s.cout * s.cin, 0.71);
    let mut out = vec![0.0; s.batch * s.cout * s.h * s.w];
    let mut g = c.benchmark_group("conv2d_1x1_128to32_64px");
    g.bench_function("parallel", |bench| {
        bench.iter(|| conv2d(black_box(&x), black_box(&w), None, s, &mut out))
    });
    g.bench_function("sequential", |bench| {
        bench.iter(|| conv2d_seq(black_box(&x), black_box(&w), None, s, &mut out))
    });
    g.finish();
}

fn bench_bilinear(c: &mut Criterion) {
    let (planes, h, w, scale) = (32, 64, 64, 4);
    let x = wave(planes * h * w, 0.41);
    let mut out = vec![0.0; planes * h * scale * w * scale];
    let mut g = c.benchmark_group("bilinear_x4_32planes_64px");
    g.bench_function("parallel", |bench| {
        bench.iter(|| bilinear_up(black_box(&x), planes, h, w, scale, &mut out))
    });
    g.bench_function("sequential", |bench| {
        bench.iter(|| bilinear_up_seq(black_box(&x), planes, h, w, scale, &mut out))
    });
    g.finish();
}

fn bench_attention(c: &mut Criterion) {
    // A spatially-reduced attention shape: many queries, few keys.
    let (nq, nk, dk) = (1024, 256, 32);
    let q = wave(nq * dk, 0.29);
    let k = wave(nk * dk, 0.53);
    let v = wave(nk * dk, 0.67);
    let scale = 1.0 / (dk as Elem).sqrt();
    let mut out = vec![0.0; nq * dk];
    let mut g = c.benchmark_group("attention_1024q_256k_d32");
    g.bench_function("parallel", |bench| {
        bench.iter(|| {
            attn_stream(black_box(&q), black_box(&k), black_box(&v), nq, nk, dk, scale, &mut out)
        })
    });
    g.bench_function("sequential", |bench| {
        bench.iter(|| {
            attn_stream_seq(
                black_box(&q),
                black_box(&k),
                black_box(&v),
                nq,
                nk,
                dk,
                scale,
                &mut out,
            )
        })
    });
    g.finish();
}

fn config() -> Criterion {
    Criterion::default()
        .sample_size(20)
        .warm_up_time(Duration::from_secs(1))
        .measurement_time(Duration::from_secs(2))
}

criterion_group! {
    name = benches;
    config = config();
    targets = bench_matmul, bench_conv2d, bench_bilinear, bench_attention
}
criterion_main!(benches);
