use gpushare::config::SimConfig;
use gpushare::enginemodel::ModelSpec;
use gpushare::policies::PolicyKind;
use gpushare::sim::run_policy;
use gpushare::workload::TraceEvent;

#[test]
fn all_policies_drain_a_small_trace() {
    let models = vec![ModelSpec::class_8b("a"), ModelSpec::class_3b("b")];
    let cfg = SimConfig::new(models, 2, 80_000_000_000);
    let trace: Vec<TraceEvent> = (0..200)
        .map(|i| TraceEvent::new(i as f64 * 0.1, if i % 3 == 0 { "b" } else { "a" }, 300 + (i % 7) * 50, 50 + i % 11))
        .collect();
    for p in PolicyKind::ALL {
        let out = run_policy(&cfg, &trace, p).unwrap_or_else(|e| panic!("{p}: {e}"));
        let s = out.record.summary();
        println!("{p}: {:?} tput {:.1} end {:.2}", out.record.overall_attainment(1.0), s.throughput, s.end_time_s);
        assert_eq!(out.record.requests.len(), 200);
    }
}
