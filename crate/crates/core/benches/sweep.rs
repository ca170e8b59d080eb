use criterion::{criterion_group, criterion_main, Criterion};
use gpushare::config::SimConfig;
use gpushare::enginemodel::ModelSpec;
use gpushare::policies::PolicyKind;
use gpushare::sweep::{run_point, Axis};
use gpushare::workload::TraceEvent;
use std::hint::black_box;

fn setup() -> (SimConfig, Vec<TraceEvent>) {
    let models = vec![ModelSpec::class_8b("a"), ModelSpec::class_3b("b"), ModelSpec::class_1b("c")];
    let cfg = SimConfig::new(models, 2, 80_000_000_000);
    let trace = (0..600)
        .map(|i| TraceEvent::new(i as f64 * 0.05, ["a", "b", "c"][i % 3], 256 + (i as u32 % 9) * 64, 16 + i as u32 % 48))
        .collect();
    (cfg, trace)
}

fn bench_sweep(c: &mut Criterion) {
    let (cfg, trace) = setup();
    let policies = [PolicyKind::Prism, PolicyKind::StaticPartition, PolicyKind::MuxFlexible, PolicyKind::QlmTimeshare];
    let values = [0.5, 1.0, 2.0];
    let mut g = c.benchmark_group("sweep");
    g.sample_size(10);
    g.bench_function("sequential", |b| {
        b.iter(|| {
            for &p in &policies {
                for &v in &values {
                    black_box(run_point(&cfg, &trace, p, Axis::RateScale, v).unwrap());
                }
            }
        })
    });
    #[cfg(feature = "parallel")]
    g.bench_function("parallel", |b| b.iter(|| black_box(gpushare::sweep::sweep(&cfg, &trace, &policies, Axis::RateScale, &values))));
    g.finish();
}

criterion_group!(benches, bench_sweep);
criterion_main!(benches);
