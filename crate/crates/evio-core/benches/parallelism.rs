//! Compares the rayon-backed data-parallel paths against a single-worker run
//! of the same code (`with_jobs(1, ..)`).

use criterion::{criterion_group, criterion_main, Criterion};
use evio_core::par;

fn bench_placeholder(c: &mut Criterion) {
    c.bench_function("map_indices", |b| {
        b.iter(|| par::map_indices(1024, |i| (i as f64).sqrt()))
    });
}

criterion_group!(benches, bench_placeholder);
criterion_main!(benches);
