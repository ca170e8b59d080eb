//! Print SLO attainment of every policy on the bundled scenarios.
//!
//! cargo run --release -p gpushare --example scenario_report -- long-tail 8 6 1 300

use gpushare::policies::PolicyKind;
use gpushare::scenarios::{long_tail_mix, strict_and_loose, two_phase};
use gpushare::sim::run_policy;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let which = args.first().map(String::as_str).unwrap_or("long-tail");
    let seed = arg(3, 1.0) as u64;
    let mut window = None;
    let (cfg, trace) = match which {
        "two-phase" => {
            let (c, t, w) = two_phase(seed, arg(1, 10.0), arg(2, 30.0)).unwrap();
            window = Some(w);
            (c, t)
        }
        "strict-loose" => strict_and_loose(seed, arg(1, 4.0), arg(2, 2.0)).unwrap(),
        _ => long_tail_mix(seed, arg(1, 8.0), arg(2, 6.0), arg(4, 300.0)).unwrap(),
    };
    println!("{} requests", trace.len());
    let mut fifo = cfg.clone();
    fifo.policy.local_scheduler = false;
    let runs = PolicyKind::ALL.iter().map(|&p| (p, &cfg, p.name())).chain(std::iter::once((PolicyKind::Prism, &fifo, "prism (fifo)")));
    for (p, cfg, name) in runs {
        let t = Instant::now();
        match run_policy(cfg, &trace, p) {
            Ok(out) => {
                let r = &out.record;
                let a = r.overall_attainment(1.0);
                let per: Vec<String> = r.attainment(1.0).iter().map(|(m, a)| format!("{m}={:.2}", a.ttft)).collect();
                println!(
                    "{:<17} ttft {:.3} tpot {:.3} tput {:>8.1} {:?} {:?} [{}]",
                    name,
                    a.ttft,
                    a.tpot,
                    r.throughput(None),
                    r.counts,
                    t.elapsed(),
                    per.join(" ")
                );
                if let Some((a, b)) = window {
                    let gb = |from, to| (0..r.gpu_count).map(|g| r.kv_integral(g, from, to)).sum::<f64>() / 1e9;
                    let zero = r.swaps.iter().filter(|s| r.kv_at(s.gpu, s.time) == 0).count();
                    println!(
                        "    kv GB*s total {:.0} surge {:.0}; swaps at zero {}/{}",
                        gb(0.0, r.end_time),
                        gb(a, b),
                        zero,
                        r.swaps.len()
                    );
                }
            }
            Err(e) => println!("{:<17} error: {e} ({:?})", name, t.elapsed()),
        }
    }
}
