use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use glean_bench::Fixture;
use glean_core::graph::{multi_step_search, Reduced, SearchParams, SearchScratch};

fn search(c: &mut Criterion) {
    let f = Fixture::new(20_000, 64, 16, 8);
    let mut scratch = SearchScratch::new(f.x.len());
    let mut g = c.benchmark_group("multi_step_search");
    g.sample_size(20);
    let cases = [
        (
            "sphering",
            Reduced::Sphering {
                model: &f.sphering,
                database: &f.sphered,
            },
        ),
        (
            "gleanvec-lazy",
            Reduced::GleanVec {
                model: &f.gleanvec,
                database: &f.encoded,
                eager: false,
            },
        ),
        (
            "gleanvec-eager",
            Reduced::GleanVec {
                model: &f.gleanvec,
                database: &f.encoded,
                eager: true,
            },
        ),
    ];
    for (name, reduced) in &cases {
        let params = SearchParams::new(10, 50, 100, 16);
        g.bench_with_input(BenchmarkId::new(*name, "d16"), reduced, |b, r| {
            b.iter(|| {
                for q in f.queries.rows().take(50) {
                    black_box(multi_step_search(q, r, &f.graph, &params, &mut scratch).unwrap());
                }
            })
        });
    }
    g.finish();
}

criterion_group!(benches, search);
criterion_main!(benches);
