use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use efcp_bench::{random_vec, sparse_window};
use efcp_core::{topk_block, Compressed, GradientWindow, Mfac, Precision};
use std::hint::black_box;

const D: usize = 100_000;
const BLOCK: usize = 4096;

fn window_kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("window");
    for m in [16, 64] {
        let w = sparse_window(m, D, 0.01, BLOCK, Precision::F32);
        let x = random_vec(D, 1);
        let coeffs = random_vec(m, 2);
        group.bench_with_input(BenchmarkId::new("sp", m), &m, |b, _| {
            b.iter(|| w.sp(black_box(&x)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("lcg", m), &m, |b, _| {
            b.iter(|| w.lcg(black_box(&coeffs)).unwrap())
        });
    }
    group.finish();
}

fn topk(c: &mut Criterion) {
    let a = random_vec(D, 3);
    c.bench_function("topk_block", |b| {
        b.iter(|| topk_block(black_box(&a), 0.01, BLOCK).unwrap())
    });
}

fn precondition(c: &mut Criterion) {
    let w = sparse_window(32, D, 0.01, BLOCK, Precision::F32);
    let mfac = Mfac::new(w, 1e-4).unwrap();
    let x = random_vec(D, 4);
    c.bench_function("sparse_mfac_precondition", |b| {
        b.iter(|| mfac.precondition(black_box(&x)).unwrap())
    });

    let g = random_vec(D, 5);
    c.bench_function("sparse_mfac_update", |b| {
        b.iter_batched(
            || {
                let w = sparse_window(32, D, 0.01, BLOCK, Precision::F32);
                Mfac::new(w, 1e-4).unwrap()
            },
            |mut m| {
                let row = topk_block(&g, 0.01, BLOCK).unwrap();
                m.update(&Compressed::Sparse(row)).unwrap();
                m
            },
            criterion::BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, window_kernels, topk, precondition);
criterion_main!(benches);
