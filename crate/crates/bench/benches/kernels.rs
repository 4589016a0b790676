use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use glean_bench::Fixture;
use glean_core::gleanvec::{eager_ip, eager_prepare, lazy_ip};
use glean_core::linalg::dot;

fn kernels(c: &mut Criterion) {
    let f = Fixture::new(20_000, 64, 16, 8);
    let q = f.queries.row(0);

    let mut g = c.benchmark_group("dot");
    for len in [16usize, 64, 256] {
        let a = vec![0.5f32; len];
        let b = vec![0.25f32; len];
        g.bench_with_input(BenchmarkId::from_parameter(len), &len, |bench, _| {
            bench.iter(|| dot(black_box(&a), black_box(&b)))
        });
    }
    g.finish();

    c.bench_function("sphering/preprocess_query", |b| {
        b.iter(|| f.sphering.preprocess_query(black_box(q)))
    });
    c.bench_function("sphering/encode", |b| {
        b.iter(|| f.sphering.encode(black_box(f.x.row(7))))
    });

    // Scoring 1000 consecutive records, one query.
    let mut g = c.benchmark_group("gleanvec_score_1000");
    g.bench_function("lazy", |b| {
        b.iter(|| {
            (0..1000)
                .map(|i| lazy_ip(q, i, &f.encoded, &f.gleanvec).unwrap())
                .sum::<f32>()
        })
    });
    g.bench_function("eager", |b| {
        b.iter(|| {
            let state = eager_prepare(q, &f.gleanvec).unwrap();
            (0..1000)
                .map(|i| eager_ip(&state, i, &f.encoded).unwrap())
                .sum::<f32>()
        })
    });
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
