//! Brute-force reference solvers and the fuzz suites that compare the
//! production schedulers and allocator against them.

pub mod allocator;
pub mod deadline;
pub mod placement;

use gpushare::global_sched::{place_models, PlacementInput};
use gpushare::local_sched::{moore_hodgson, simulated_finish_times, QueuedRequest};
use gpushare::rng::indexed_substream;
use gpushare::sweep::par_map;
use rand::Rng;
use serde::Serialize;
use std::str::FromStr;
use thiserror::Error;

pub use deadline::{brute_force_deadline_schedule, brute_force_permutations};
pub use placement::{brute_force_placement, OptimalPlacement};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Deadline,
    Placement,
    Allocator,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Deadline, Suite::Placement, Suite::Allocator];
    pub fn name(self) -> &'static str {
        match self {
            Suite::Deadline => "deadline",
            Suite::Placement => "placement",
            Suite::Allocator => "allocator",
        }
    }
}

impl FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite {s} (expected deadline, placement, allocator or all)"))
    }
}

/// A failing instance, reproducible from `(seed, index)`.
#[derive(Debug, Clone, Serialize)]
pub struct FailureCase {
    pub seed: u64,
    pub index: u64,
    pub detail: String,
    pub instance: serde_json::Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub instances: u64,
    pub passed: u64,
    pub failures: Vec<FailureCase>,
    /// Allocator suite only.
    pub packing: Option<PackingSummary>,
}

/// Most-occupied-first packing against lowest-index placement on the same
/// operation sequences.
#[derive(Debug, Clone, Default, Serialize)]
pub struct PackingSummary {
    pub checks: u64,
    /// Checks after which some pool held more pages than the naive order.
    pub worse: u64,
    /// Pool-pages summed over every check.
    pub mapped_sum: u64,
    pub naive_sum: u64,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn collect(suite: Suite, results: Vec<Result<(), FailureCase>>) -> SuiteReport {
    let instances = results.len() as u64;
    let failures: Vec<FailureCase> = results.into_iter().filter_map(Result::err).collect();
    SuiteReport { suite: suite.name(), instances, passed: instances - failures.len() as u64, failures, packing: None }
}

pub const DEADLINE_INSTANCES: u64 = 1000;
pub const PLACEMENT_INSTANCES: u64 = 1000;
pub const ALLOCATOR_OPS: u64 = 100_000;
const ALLOCATOR_SEQUENCE_OPS: u64 = 1000;

/// Times are multiples of 1/64 s so that sums are exact and both sides
/// compare identical floating-point values.
fn ticks<R: Rng>(rng: &mut R, lo: u32, hi: u32) -> f64 {
    f64::from(rng.random_range(lo..=hi)) / 64.0
}

/// Random queue of up to `max_n` requests (prefill 0.1 to 5 s) and the
/// current time.
pub fn deadline_instance(seed: u64, index: u64, max_n: usize) -> (Vec<QueuedRequest>, f64) {
    let mut rng = indexed_substream(seed, "fuzz-deadline", index);
    let n = rng.random_range(0..=max_n);
    let now = ticks(&mut rng, 0, 320);
    let queue = (0..n)
        .map(|i| {
            let arrival = ticks(&mut rng, 0, (now * 64.0) as u32);
            let exec_s = ticks(&mut rng, 7, 320);
            let slack = ticks(&mut rng, 0, 960);
            QueuedRequest {
                id: i as u64,
                model: "m".into(),
                arrival,
                prompt: 1,
                output: 1,
                slo_s: (now - arrival) + slack,
                exec_s,
            }
        })
        .collect();
    (queue, now)
}

fn check_deadline(seed: u64, index: u64) -> Result<(), FailureCase> {
    let (queue, now) = deadline_instance(seed, index, 8);
    let fail = |detail: String| FailureCase {
        seed,
        index,
        detail,
        instance: serde_json::json!({ "now": now, "queue": queue }),
    };
    let decision = moore_hodgson(&queue, now);
    let best = brute_force_deadline_schedule(&queue, now).map_err(|e| fail(e.to_string()))?;
    if decision.on_time() != best {
        return Err(fail(format!("scheduler admits {} on time, optimum is {best}", decision.on_time())));
    }
    for (&i, &f) in decision.admit.iter().zip(&simulated_finish_times(&queue, &decision)) {
        if f > queue[i].deadline() {
            return Err(fail(format!("admitted request {} finishes late", queue[i].id)));
        }
    }
    if decision.admit.len() + decision.deferred.len() != queue.len() {
        return Err(fail("requests lost between admitted and deferred".into()));
    }
    if queue.len() <= 6 {
        let perm = brute_force_permutations(&queue, now).map_err(|e| fail(e.to_string()))?;
        if perm != best {
            return Err(fail(format!("subset oracle {best} disagrees with permutation oracle {perm}")));
        }
    }
    if let Some(extra) = queue.first() {
        let mut more = queue.clone();
        more.push(QueuedRequest { id: queue.len() as u64, ..extra.clone() });
        let bigger = brute_force_deadline_schedule(&more, now).map_err(|e| fail(e.to_string()))?;
        if bigger < best {
            return Err(fail("adding a request lowered the optimum".into()));
        }
    }
    Ok(())
}

pub const PLACEMENT_CAPACITY: u64 = 80_000_000_000;

/// Up to six models on up to three GPUs. Total weight stays below one GPU's
/// capacity so the greedy can always place every part.
pub fn placement_instance(seed: u64, index: u64) -> (Vec<PlacementInput>, Vec<u64>) {
    let mut rng = indexed_substream(seed, "fuzz-placement", index);
    let n = rng.random_range(1..=3usize);
    let m = rng.random_range(1..=6usize);
    let shares: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
    let budget = PLACEMENT_CAPACITY as f64 * rng.random_range(0.1..0.95);
    let total: f64 = shares.iter().sum();
    let models = shares
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let rate = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..10.0) };
            let slo = rng.random_range(0.05..2.0);
            let tp = if n >= 2 && rng.random_bool(0.2) { 2 } else { 1 };
            let w = ((budget * s / total) as u64 / tp) * tp;
            PlacementInput::new(format!("m{i}"), rate, slo, w.max(tp)).with_tp(tp as u32)
        })
        .collect();
    (models, vec![PLACEMENT_CAPACITY; n])
}

fn check_placement(seed: u64, index: u64) -> Result<(), FailureCase> {
    let (models, caps) = placement_instance(seed, index);
    let fail = |detail: String| FailureCase {
        seed,
        index,
        detail,
        instance: serde_json::json!({ "capacities": caps, "models": models }),
    };
    let plan = place_models(&models, &caps, 0.0).map_err(|e| fail(format!("greedy failed: {e}")))?;
    let opt = brute_force_placement(&models, &caps)
        .map_err(|e| fail(e.to_string()))?
        .ok_or_else(|| fail("no feasible placement".into()))?;
    let alg = plan.max_kvpr();
    let eps = 1e-9;
    if alg < opt.max_kvpr * (1.0 - eps) {
        return Err(fail(format!("greedy {alg} beats the exhaustive optimum {}", opt.max_kvpr)));
    }
    let bound = match plan.bound_factor() {
        Some(f) => opt.max_kvpr * f,
        None => 0.0,
    };
    if alg > bound * (1.0 + eps) {
        return Err(fail(format!("greedy {alg} exceeds bound {bound} (optimum {})", opt.max_kvpr)));
    }
    Ok(())
}

fn allocator_failure(seed: u64, index: u64, op: usize, detail: &str) -> FailureCase {
    FailureCase {
        seed,
        index,
        detail: format!("operation {op}: {detail}"),
        instance: serde_json::json!({ "ops": ALLOCATOR_SEQUENCE_OPS }),
    }
}

pub fn verify_deadline(seed: u64, instances: u64) -> SuiteReport {
    let idx: Vec<u64> = (0..instances).collect();
    collect(Suite::Deadline, par_map(&idx, |&i| check_deadline(seed, i)))
}

pub fn verify_placement(seed: u64, instances: u64) -> SuiteReport {
    let idx: Vec<u64> = (0..instances).collect();
    collect(Suite::Placement, par_map(&idx, |&i| check_placement(seed, i)))
}

/// `ops` operations split into independent sequences of 1000. A sequence
/// fails on a broken invariant, or when packing ever maps more pages than
/// lowest-index placement would.
pub fn verify_allocator(seed: u64, ops: u64) -> SuiteReport {
    let idx: Vec<u64> = (0..ops.div_ceil(ALLOCATOR_SEQUENCE_OPS)).collect();
    let runs = par_map(&idx, |&i| (i, allocator::fuzz_sequence(seed, i, ALLOCATOR_SEQUENCE_OPS as usize)));
    let mut packing = PackingSummary::default();
    let mut failures = Vec::new();
    for (i, run) in runs {
        match run {
            Err((op, detail)) => failures.push(allocator_failure(seed, i, op, &detail)),
            Ok(stats) => {
                packing.checks += stats.checks;
                packing.worse += stats.worse;
                packing.mapped_sum += stats.mapped_sum;
                packing.naive_sum += stats.naive_sum;
                if let Some((op, detail)) = stats.first_worse {
                    failures.push(allocator_failure(seed, i, op, &format!("packing: {detail}")));
                }
            }
        }
    }
    let instances = idx.len() as u64 * ALLOCATOR_SEQUENCE_OPS;
    let failed_ops = failures.len() as u64 * ALLOCATOR_SEQUENCE_OPS;
    SuiteReport { suite: Suite::Allocator.name(), instances, passed: instances - failed_ops, failures, packing: Some(packing) }
}

/// Run a suite at its standard size.
pub fn verify(suite: Suite, seed: u64) -> SuiteReport {
    match suite {
        Suite::Deadline => verify_deadline(seed, DEADLINE_INSTANCES),
        Suite::Placement => verify_placement(seed, PLACEMENT_INSTANCES),
        Suite::Allocator => verify_allocator(seed, ALLOCATOR_OPS),
    }
}
