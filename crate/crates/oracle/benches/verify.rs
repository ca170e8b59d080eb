use criterion::{criterion_group, criterion_main, Criterion};
use gpushare_oracle::{verify_allocator, verify_deadline, verify_placement};
use std::hint::black_box;

fn suites() {
    black_box(verify_deadline(1, 200));
    black_box(verify_placement(1, 200));
    black_box(verify_allocator(1, 20_000));
}

fn bench_verify(c: &mut Criterion) {
    let mut g = c.benchmark_group("verify");
    g.sample_size(10);
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    g.bench_function("sequential", |b| b.iter(|| single.install(suites)));
    #[cfg(feature = "parallel")]
    g.bench_function("parallel", |b| b.iter(suites));
    g.finish();
}

criterion_group!(benches, bench_verify);
criterion_main!(benches);
