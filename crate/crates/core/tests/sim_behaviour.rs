use gpushare::config::SimConfig;
use gpushare::enginemodel::ModelSpec;
use gpushare::policies::PolicyKind;
use gpushare::sim::{replay, run_policy, EventLog};
use gpushare::workload::TraceEvent;
use proptest::prelude::*;

fn two_model_trace(n: usize, gap: f64) -> Vec<TraceEvent> {
    (0..n).map(|i| TraceEvent::new(i as f64 * gap, if i % 2 == 0 { "a" } else { "b" }, 200, 20)).collect()
}

fn two_models(gpus: usize) -> SimConfig {
    SimConfig::new(vec![ModelSpec::class_8b("a"), ModelSpec::class_8b("b")], gpus, 80_000_000_000)
}

#[test]
fn same_seed_gives_identical_json() {
    let cfg = two_models(2);
    let trace = two_model_trace(300, 0.05);
    for p in [PolicyKind::Prism, PolicyKind::QlmTimeshare] {
        let a = serde_json::to_string(&run_policy(&cfg, &trace, p).unwrap().record).unwrap();
        let b = serde_json::to_string(&run_policy(&cfg, &trace, p).unwrap().record).unwrap();
        assert_eq!(a, b, "{p}");
    }
}

#[test]
fn dedicated_matches_prism_for_one_model_on_one_gpu() {
    let cfg = SimConfig::new(vec![ModelSpec::class_8b("a")], 1, 80_000_000_000);
    let trace: Vec<TraceEvent> = (0..400).map(|i| TraceEvent::new(i as f64 * 0.02, "a", 100 + (i % 13) * 40, 10 + i % 29)).collect();
    let d = run_policy(&cfg, &trace, PolicyKind::Dedicated).unwrap().record;
    let p = run_policy(&cfg, &trace, PolicyKind::Prism).unwrap().record;
    assert_eq!(d.requests, p.requests);
}

#[test]
fn replay_reproduces_the_event_sequence() {
    let mut cfg = two_models(2);
    cfg.policy.kind = PolicyKind::Prism;
    let trace = two_model_trace(200, 0.1);
    let out = run_policy(&cfg, &trace, PolicyKind::Prism).unwrap();
    let log = EventLog { trace: trace.clone(), events: out.event_log.clone() };
    let again = replay(&cfg, &log).unwrap();
    assert_eq!(again.record, out.record);

    let mut bad = log.clone();
    bad.events.pop();
    assert!(replay(&cfg, &bad).is_err());
}

#[test]
fn timeshare_swaps_on_every_alternation() {
    let cfg = two_models(1);
    // Gaps long enough for each request to finish before the next arrives.
    let trace = two_model_trace(12, 60.0);
    let r = run_policy(&cfg, &trace, PolicyKind::QlmTimeshare).unwrap().record;
    // The first model starts resident; every later change of model swaps.
    assert_eq!(r.swaps.len(), 11);
    for s in &r.swaps {
        assert_eq!(r.kv_at(s.gpu, s.time), 0, "swap at {}", s.time);
    }
    assert!(r.requests.iter().all(|q| q.finished()));
}

#[test]
fn timeshare_single_model_never_swaps_after_loading() {
    let cfg = SimConfig::new(vec![ModelSpec::class_8b("a")], 1, 80_000_000_000);
    let trace: Vec<TraceEvent> = (0..50).map(|i| TraceEvent::new(i as f64 * 0.5, "a", 200, 20)).collect();
    let r = run_policy(&cfg, &trace, PolicyKind::QlmTimeshare).unwrap().record;
    assert_eq!(r.swaps.len(), 0);
}

#[test]
fn timeshare_swaps_do_not_drop_with_more_gpus() {
    let trace = two_model_trace(40, 20.0);
    let one = run_policy(&two_models(1), &trace, PolicyKind::QlmTimeshare).unwrap().record;
    let two = run_policy(&two_models(2), &trace, PolicyKind::QlmTimeshare).unwrap().record;
    assert!(two.swaps.len() >= one.swaps.len(), "{} < {}", two.swaps.len(), one.swaps.len());
}

fn arb_trace() -> impl Strategy<Value = Vec<TraceEvent>> {
    prop::collection::vec((0.0f64..30.0, 0usize..3, 1u32..1500, 1u32..200), 1..60).prop_map(|mut v| {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v.into_iter().map(|(t, m, p, o)| TraceEvent::new(t, ["a", "b", "c"][m], p, o)).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_request_is_accounted_for(trace in arb_trace(), gpus in 1usize..4) {
        let models = vec![ModelSpec::class_8b("a"), ModelSpec::class_3b("b"), ModelSpec::class_1b("c")];
        let cfg = SimConfig::new(models, gpus, 80_000_000_000);
        for p in [PolicyKind::Prism, PolicyKind::StaticPartition, PolicyKind::MuxFlexible, PolicyKind::QlmTimeshare] {
            let r = run_policy(&cfg, &trace, p).unwrap().record;
            prop_assert_eq!(r.requests.len(), trace.len());
            prop_assert_eq!(r.unfinished, r.requests.iter().filter(|q| !q.finished()).count());
            for q in &r.requests {
                if let (Some(f), Some(c)) = (q.first_token, q.completion) {
                    prop_assert!(q.arrival <= f && f <= c, "{:?}", q);
                }
                prop_assert!(q.completion.is_none() || q.first_token.is_some());
            }
            let a = r.overall_attainment(1.0);
            prop_assert!((0.0..=1.0).contains(&a.ttft) && (0.0..=1.0).contains(&a.tpot));
            prop_assert!(r.overall_attainment(2.0).ttft >= a.ttft);
            for s in &r.kv_series {
                prop_assert!(s.mapped_bytes <= cfg.gpu_capacity_bytes);
            }
        }
    }
}
