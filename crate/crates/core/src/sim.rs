//! Discrete-event simulation of a GPU cluster serving many models.
//!
//! Events are processed in `(time, kind, sequence)` order on integer
//! microseconds. Iterations of engines sharing a GPU are serialized: an
//! engine runs once every GPU it spans is idle, in FIFO order of readiness.

use crate::config::{ConfigError, SimConfig};
use crate::enginemodel::{ActivationMethod, Engine, EngineError, EngineRequest, EngineStatus, ModelSpec};
use crate::global_sched::{activate_on_arrival, eviction_tick, kvpr, place_models, GpuMemory, GpuView, IdleModel, PlacementInput, PressurePredicate};
use crate::local_sched::{dispatch, moore_hodgson, requeue_deferred, DispatchOutcome, QueuedRequest};
use crate::metrics::{Counts, KvSample, KvprSample, QueueSample, RequestRecord, RunRecord, Slo, SwapRecord};
use crate::pagealloc::PhysicalLedger;
use crate::policies::{initial_placement, partition_caps, GroupQueue, PolicyError, PolicyKind};
use crate::time::SimTime;
use crate::workload::TraceEvent;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("trace is empty")]
    EmptyTrace,
    #[error("trace request {req} names unknown model {model}")]
    UnknownModel { req: usize, model: String },
    #[error("request {req} of {model} needs {pages} KV pages, more than its GPU can ever hold ({limit})")]
    RequestTooLarge { req: usize, model: String, pages: u64, limit: u64 },
    #[error("no events left with {outstanding} requests outstanding at t={time}s")]
    NotDrained { outstanding: usize, time: f64 },
    #[error("replay diverged at event {index}")]
    ReplayDiverged { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrival,
    IterationDone,
    ActivationDone,
    SchedulerTick,
    EvictionCheck,
    BufferRefill,
}

/// A processed event. `target` is a request, engine or GPU index
/// depending on the kind.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Event {
    pub time: SimTime,
    pub kind: EventKind,
    pub seq: u64,
    pub target: u64,
}

/// One scheduler tick: placement before and after, and what changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub time: f64,
    pub placement: BTreeMap<String, Vec<usize>>,
    pub migrations: Vec<(String, Vec<usize>, Vec<usize>)>,
    pub evictions: Vec<String>,
    pub kvpr_before: Vec<f64>,
    pub kvpr_after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub record: RunRecord,
    pub plan_log: Vec<PlanRecord>,
    pub event_log: Vec<Event>,
}

/// A trace together with the events processed when simulating it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub trace: Vec<TraceEvent>,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq)]
enum Placement {
    Resident(usize),
    /// Waiting for memory on these GPUs; weight pages are reserved.
    Pending(Vec<usize>),
    Evicted,
}

#[derive(Debug, Clone)]
struct ModelRt {
    spec: ModelSpec,
    place: Placement,
    rate: f64,
    rate_at: f64,
    outstanding: usize,
    busy_since: Option<f64>,
    idle_since: f64,
    busy: Vec<(f64, f64)>,
    /// Requests waiting for the model to find a GPU.
    held: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
struct ReqRt {
    model: usize,
    first: Option<SimTime>,
    done: Option<SimTime>,
    preemptions: u32,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    trace: &'a [TraceEvent],
    policy: PolicyKind,
    deadline_admission: bool,
    now: SimTime,
    seq: u64,
    heap: BinaryHeap<Reverse<Event>>,
    log: Vec<Event>,
    ledgers: Vec<PhysicalLedger>,
    engines: Vec<Engine>,
    pooled: Vec<Vec<usize>>,
    engine_model: Vec<Option<usize>>,
    stalled: Vec<bool>,
    in_ready: Vec<bool>,
    ready: BTreeSet<(u64, usize)>,
    gpu_busy: Vec<Option<usize>>,
    draining: BTreeSet<usize>,
    models: Vec<ModelRt>,
    model_idx: BTreeMap<String, usize>,
    queues: Vec<Vec<QueuedRequest>>,
    queue_dirty: Vec<bool>,
    reqs: Vec<ReqRt>,
    reserve: Vec<u64>,
    refill_pending: Vec<bool>,
    unplaced: BTreeSet<usize>,
    groups: GroupQueue,
    caps: BTreeMap<(String, usize), u64>,
    counts: Counts,
    kv_series: Vec<KvSample>,
    last_kv: Vec<Option<u64>>,
    kvpr_series: Vec<KvprSample>,
    queue_series: Vec<QueueSample>,
    last_q: BTreeMap<(usize, usize), usize>,
    swaps: Vec<SwapRecord>,
    plan_log: Vec<PlanRecord>,
    arrived: usize,
    outstanding: usize,
    last_arrival: SimTime,
}

/// Simulate `trace` under `cfg` (policy and seed included).
pub fn run(cfg: &SimConfig, trace: &[TraceEvent]) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg, trace)?;
    sim.main_loop()?;
    Ok(sim.finish())
}

/// Simulate with `kind` replacing the configured policy.
pub fn run_policy(cfg: &SimConfig, trace: &[TraceEvent], kind: PolicyKind) -> Result<SimOutput, SimError> {
    let mut c = cfg.clone();
    c.policy.kind = kind;
    run(&c, trace)
}

/// Re-run a persisted log, checking that the same events are processed.
pub fn replay(cfg: &SimConfig, log: &EventLog) -> Result<SimOutput, SimError> {
    let out = run(cfg, &log.trace)?;
    if let Some(index) = out.event_log.iter().zip(&log.events).position(|(a, b)| a != b) {
        return Err(SimError::ReplayDiverged { index });
    }
    if out.event_log.len() != log.events.len() {
        return Err(SimError::ReplayDiverged { index: out.event_log.len().min(log.events.len()) });
    }
    Ok(out)
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a SimConfig, trace: &'a [TraceEvent]) -> Result<Self, SimError> {
        if trace.is_empty() {
            return Err(SimError::EmptyTrace);
        }
        let model_idx: BTreeMap<String, usize> = cfg.models.iter().enumerate().map(|(i, m)| (m.id.clone(), i)).collect();
        let mut reqs = Vec::with_capacity(trace.len());
        for (i, ev) in trace.iter().enumerate() {
            let m = *model_idx
                .get(&ev.model_id)
                .ok_or_else(|| SimError::UnknownModel { req: i, model: ev.model_id.clone() })?;
            reqs.push(ReqRt { model: m, ..Default::default() });
        }
        let g = cfg.gpu_count;
        let t0 = trace.iter().map(|e| e.arrival_time).fold(f64::INFINITY, f64::min);
        let window = cfg.sched.profile_window_s;
        let mut rates: BTreeMap<String, f64> = cfg.models.iter().map(|m| (m.id.clone(), 0.0)).collect();
        for ev in trace.iter().filter(|e| e.arrival_time < t0 + window) {
            *rates.get_mut(&ev.model_id).expect("validated") += 1.0 / window;
        }
        let placement = initial_placement(cfg, &rates)?;
        let caps = if cfg.policy.kind == PolicyKind::StaticPartition {
            partition_caps(cfg, &placement.resident)?
        } else {
            BTreeMap::new()
        };

        let models = cfg
            .models
            .iter()
            .map(|spec| ModelRt {
                spec: spec.clone(),
                place: Placement::Evicted,
                rate: rates[&spec.id],
                rate_at: 0.0,
                outstanding: 0,
                busy_since: None,
                idle_since: 0.0,
                busy: Vec::new(),
                held: Vec::new(),
            })
            .collect();
        let mut sim = Sim {
            cfg,
            trace,
            policy: cfg.policy.kind,
            deadline_admission: cfg.policy.uses_deadline_admission(),
            now: SimTime::ZERO,
            seq: 0,
            heap: BinaryHeap::new(),
            log: Vec::new(),
            ledgers: (0..g)
                .map(|i| PhysicalLedger::new(i, cfg.gpu_capacity_bytes, cfg.page_bytes).with_map_latency(cfg.sched.map_latency_s))
                .collect(),
            engines: Vec::new(),
            pooled: vec![Vec::new(); g],
            engine_model: Vec::new(),
            stalled: Vec::new(),
            in_ready: Vec::new(),
            ready: BTreeSet::new(),
            gpu_busy: vec![None; g],
            draining: BTreeSet::new(),
            models,
            model_idx,
            queues: vec![Vec::new(); g],
            queue_dirty: vec![false; g],
            reqs,
            reserve: vec![0; g],
            refill_pending: vec![false; g],
            unplaced: BTreeSet::new(),
            groups: GroupQueue::new(cfg.policy.qlm_group_window_s),
            caps,
            counts: Counts::default(),
            kv_series: Vec::new(),
            last_kv: vec![None; g],
            kvpr_series: Vec::new(),
            queue_series: Vec::new(),
            last_q: BTreeMap::new(),
            swaps: Vec::new(),
            plan_log: Vec::new(),
            arrived: 0,
            outstanding: 0,
            last_arrival: SimTime::ZERO,
        };
        for (id, gpus) in &placement.resident {
            let m = sim.model_idx[id];
            let e = sim.start_activation(m, gpus, ActivationMethod::Parallel, 0.0, false)?;
            sim.engines[e].finish_activation()?;
            sim.heap.retain(|_| false);
        }
        sim.check_request_sizes()?;
        for l in &mut sim.ledgers {
            l.refill_buffer(cfg.sched.buffer_target_pages);
        }
        for (i, ev) in trace.iter().enumerate() {
            let t = SimTime::from_secs(ev.arrival_time);
            sim.last_arrival = sim.last_arrival.max(t);
            sim.push(t, EventKind::Arrival, i as u64);
        }
        sim.push(SimTime::from_secs(cfg.sched.tick_s), EventKind::SchedulerTick, 0);
        Ok(sim)
    }

    fn check_request_sizes(&self) -> Result<(), SimError> {
        let page = self.cfg.page_bytes;
        for (i, ev) in self.trace.iter().enumerate() {
            let spec = &self.models[self.reqs[i].model].spec;
            let tpp = page / spec.token_kv_bytes_per_gpu();
            let pages = u64::from(ev.prompt_tokens + ev.output_tokens).div_ceil(tpp);
            let weights = spec.weight_bytes_per_gpu().div_ceil(page);
            let mut limit = self.cfg.gpu_capacity_bytes / page - weights;
            if let Placement::Resident(e) = self.models[self.reqs[i].model].place {
                for &g in self.engines[e].gpus() {
                    if let Some(&cap) = self.caps.get(&(spec.id.clone(), g)) {
                        limit = limit.min(cap);
                    }
                }
            }
            if pages > limit {
                return Err(SimError::RequestTooLarge { req: i, model: spec.id.clone(), pages, limit });
            }
        }
        Ok(())
    }

    fn push(&mut self, time: SimTime, kind: EventKind, target: u64) {
        debug_assert!(time >= self.now, "event scheduled in the past");
        self.seq += 1;
        self.heap.push(Reverse(Event { time, kind, seq: self.seq, target }));
    }

    fn now_s(&self) -> f64 {
        self.now.as_secs()
    }

    fn main_loop(&mut self) -> Result<(), SimError> {
        let horizon = self.last_arrival + SimTime::from_secs(self.cfg.sched.drain_horizon_s);
        while let Some(Reverse(ev)) = self.heap.pop() {
            if ev.time > horizon && self.outstanding > 0 {
                return Ok(());
            }
            self.now = ev.time;
            self.log.push(ev.clone());
            let target = ev.target as usize;
            match ev.kind {
                EventKind::Arrival => self.on_arrival(target)?,
                EventKind::IterationDone => self.on_iteration_done(target)?,
                EventKind::ActivationDone => self.on_activation_done(target)?,
                EventKind::SchedulerTick => self.on_tick()?,
                EventKind::EvictionCheck => self.on_eviction_check()?,
                EventKind::BufferRefill => {
                    self.refill_pending[target] = false;
                    self.ledgers[target].refill_buffer(self.cfg.sched.buffer_target_pages);
                }
            }
            self.try_start()?;
            self.record_series();
        }
        if self.outstanding > 0 {
            return Err(SimError::NotDrained { outstanding: self.outstanding, time: self.now_s() });
        }
        Ok(())
    }

    // ---- arrivals and routing ----

    fn decayed_rate(&self, m: usize, t: f64) -> f64 {
        let md = &self.models[m];
        md.rate * (-(t - md.rate_at) / self.cfg.sched.rate_window_s).exp()
    }

    fn on_arrival(&mut self, r: usize) -> Result<(), SimError> {
        let m = self.reqs[r].model;
        let t = self.now_s();
        let w = self.cfg.sched.rate_window_s;
        let rate = self.decayed_rate(m, t) + 1.0 / w;
        let md = &mut self.models[m];
        md.rate = rate;
        md.rate_at = t;
        if md.outstanding == 0 {
            md.busy_since = Some(t);
        }
        md.outstanding += 1;
        self.outstanding += 1;
        self.arrived += 1;
        if self.policy == PolicyKind::QlmTimeshare {
            let model = self.models[m].spec.id.clone();
            self.groups.push(&model, t, r as u64);
            return self.qlm_assign();
        }
        self.route(r)
    }

    fn queued(&self, r: usize) -> QueuedRequest {
        let ev = &self.trace[r];
        let spec = &self.models[self.reqs[r].model].spec;
        QueuedRequest {
            id: r as u64,
            model: spec.id.clone(),
            arrival: SimTime::from_secs(ev.arrival_time).as_secs(),
            prompt: ev.prompt_tokens,
            output: ev.output_tokens,
            slo_s: spec.ttft_slo_s,
            exec_s: f64::from(ev.prompt_tokens) / spec.prefill_speed(),
        }
    }

    fn route(&mut self, r: usize) -> Result<(), SimError> {
        let m = self.reqs[r].model;
        match self.models[m].place.clone() {
            Placement::Resident(e) => self.deliver(r, e),
            Placement::Pending(gpus) => {
                let q = self.queued(r);
                self.queues[gpus[0]].push(q);
                self.queue_dirty[gpus[0]] = true;
                Ok(())
            }
            Placement::Evicted => {
                self.models[m].held.push(r);
                self.request_activation(m)
            }
        }
    }

    fn deliver(&mut self, r: usize, e: usize) -> Result<(), SimError> {
        let g = self.engines[e].home_gpu();
        self.queue_dirty[g] = true;
        if !self.deadline_admission && self.engines[e].status() == EngineStatus::Serving {
            let ev = &self.trace[r];
            self.engines[e].enqueue(EngineRequest::new(r as u64, ev.prompt_tokens, ev.output_tokens))?;
            self.make_ready(e);
            return Ok(());
        }
        let q = self.queued(r);
        self.queues[g].push(q);
        if self.deadline_admission {
            self.schedule_gpu(g)?;
        }
        Ok(())
    }

    // ---- local admission ----

    fn schedule_gpu(&mut self, g: usize) -> Result<(), SimError> {
        if self.queues[g].is_empty() {
            return Ok(());
        }
        let mut queue = std::mem::take(&mut self.queues[g]);
        if !self.deadline_admission {
            // flush held requests of models that are now serving
            let mut keep = Vec::new();
            for q in queue {
                let m = self.model_idx[&q.model];
                match self.models[m].place {
                    Placement::Resident(e) if self.engines[e].status() == EngineStatus::Serving => {
                        self.engines[e].enqueue(EngineRequest::new(q.id, q.prompt, q.output))?;
                        self.make_ready(e);
                    }
                    _ => keep.push(q),
                }
            }
            self.queues[g] = keep;
            self.queue_dirty[g] = true;
            return Ok(());
        }
        let residual: f64 = self
            .engines
            .iter()
            .filter(|e| e.gpus().contains(&g) && matches!(e.status(), EngineStatus::Serving | EngineStatus::Draining))
            .map(Engine::pending_prefill_secs)
            .sum();
        let decision = moore_hodgson(&queue, self.now_s() + residual);
        let mut headroom: BTreeMap<usize, u64> = BTreeMap::new();
        let mut failure = None;
        let sent = dispatch(&queue, &decision, |q| match self.offer(q, &mut headroom) {
            Ok(o) => o,
            Err(err) => {
                failure.get_or_insert(err);
                DispatchOutcome::Held
            }
        });
        if let Some(err) = failure {
            return Err(err);
        }
        if !sent.is_empty() {
            requeue_deferred(&mut queue, &sent);
            self.queue_dirty[g] = true;
        }
        self.queues[g] = queue;
        Ok(())
    }

    fn headroom(&self, g: usize) -> u64 {
        self.ledgers[g].available_pages().saturating_sub(self.reserve[g])
    }

    fn offer(&mut self, q: &QueuedRequest, headroom: &mut BTreeMap<usize, u64>) -> Result<DispatchOutcome, SimError> {
        let m = self.model_idx[&q.model];
        let Placement::Resident(e) = self.models[m].place else {
            return Ok(DispatchOutcome::Held);
        };
        let eng = &self.engines[e];
        if eng.status() != EngineStatus::Serving {
            return Ok(DispatchOutcome::Held);
        }
        let spec = &self.models[m].spec;
        if eng.pending_prefill_tokens() >= u64::from(spec.chunk_size) {
            return Ok(DispatchOutcome::Blocked);
        }
        let tokens = u64::from(q.prompt.min(spec.chunk_size)) + 1;
        let reserved = eng.reserved_buffer_pages(&self.ledgers);
        let mut needs = Vec::new();
        for (&g, &pool) in eng.gpus().iter().zip(eng.pools()) {
            let need = self.ledgers[g].pool(pool).map_or(0, |p| p.pages_needed(tokens)) + reserved;
            let room = *headroom.entry(g).or_insert_with(|| self.headroom(g));
            if room < need {
                return Ok(DispatchOutcome::Blocked);
            }
            needs.push((g, need));
        }
        for (g, need) in needs {
            *headroom.get_mut(&g).expect("filled above") -= need;
        }
        self.engines[e].enqueue(EngineRequest::new(q.id, q.prompt, q.output))?;
        self.make_ready(e);
        Ok(DispatchOutcome::Dispatched)
    }

    // ---- GPU compute ----

    fn make_ready(&mut self, e: usize) {
        let eng = &self.engines[e];
        if self.in_ready[e] || eng.is_busy() || self.stalled[e] || !eng.has_work() {
            return;
        }
        if !matches!(eng.status(), EngineStatus::Serving | EngineStatus::Draining) {
            return;
        }
        self.seq += 1;
        self.ready.insert((self.seq, e));
        self.in_ready[e] = true;
    }

    fn wake_gpus(&mut self, gpus: &[usize]) {
        for e in 0..self.engines.len() {
            if self.stalled[e] && self.engines[e].gpus().iter().any(|g| gpus.contains(g)) {
                self.stalled[e] = false;
                self.make_ready(e);
            }
        }
    }

    fn try_start(&mut self) -> Result<(), SimError> {
        loop {
            let mut changed = false;
            let mut claimed = BTreeSet::new();
            let entries: Vec<(u64, usize)> = self.ready.iter().copied().collect();
            for (s, e) in entries {
                if !self.ready.contains(&(s, e)) {
                    continue;
                }
                let gpus = self.engines[e].gpus().to_vec();
                if gpus.iter().any(|&g| self.gpu_busy[g].is_some() || claimed.contains(&g)) {
                    claimed.extend(gpus);
                    continue;
                }
                self.ready.remove(&(s, e));
                self.in_ready[e] = false;
                self.engines[e].set_now(self.now);
                let plan = self.engines[e].begin_iteration(&mut self.ledgers)?;
                changed = true;
                self.queue_dirty[self.engines[e].home_gpu()] = true;
                if !plan.preempted.is_empty() {
                    self.counts.preemptions += plan.preempted.len() as u64;
                    self.wake_gpus(&gpus);
                }
                if plan.is_stalled() {
                    self.stalled[e] = true;
                    continue;
                }
                for &g in &gpus {
                    self.gpu_busy[g] = Some(e);
                }
                self.push(self.now + plan.duration, EventKind::IterationDone, e as u64);
                self.schedule_refills(&gpus);
            }
            if !changed && !self.break_deadlock() {
                return Ok(());
            }
        }
    }

    /// An idle GPU whose engines are all stalled on memory held by their
    /// own partial prefills will never progress; recompute the youngest
    /// admission among them.
    fn break_deadlock(&mut self) -> bool {
        for g in 0..self.gpu_busy.len() {
            if self.gpu_busy[g].is_some() {
                continue;
            }
            let touching: Vec<usize> = (0..self.engines.len()).filter(|&e| self.engines[e].gpus().contains(&g)).collect();
            if touching.iter().any(|&e| self.in_ready[e]) {
                continue;
            }
            let victim = touching
                .iter()
                .copied()
                .filter(|&e| self.stalled[e] && self.engines[e].kv_tokens() > 0)
                .max_by_key(|&e| (self.engines[e].youngest_admission(), e));
            if let Some(e) = victim {
                if self.engines[e].preempt_youngest(&mut self.ledgers).is_some() {
                    self.counts.preemptions += 1;
                    let gpus = self.engines[e].gpus().to_vec();
                    self.wake_gpus(&gpus);
                    return true;
                }
            }
        }
        false
    }

    fn schedule_refills(&mut self, gpus: &[usize]) {
        let target = self.cfg.sched.buffer_target_pages;
        for &g in gpus {
            let l = &self.ledgers[g];
            if !self.refill_pending[g] && l.buffer_pages() < target && l.free_pages() > 0 {
                let deficit = (target - l.buffer_pages()).min(l.free_pages());
                let delay = SimTime(l.map_latency().micros() * deficit);
                self.refill_pending[g] = true;
                self.push(self.now + delay, EventKind::BufferRefill, g as u64);
            }
        }
    }

    fn on_iteration_done(&mut self, e: usize) -> Result<(), SimError> {
        let gpus = self.engines[e].gpus().to_vec();
        for &g in &gpus {
            self.gpu_busy[g] = None;
        }
        let res = self.engines[e].finish_iteration(&mut self.ledgers)?;
        for &id in &res.first_tokens {
            self.reqs[id as usize].first = Some(self.now);
        }
        let t = self.now_s();
        for c in &res.completions {
            let r = c.id as usize;
            self.reqs[r].done = Some(self.now);
            self.reqs[r].preemptions = c.preemptions;
            let md = &mut self.models[self.reqs[r].model];
            md.outstanding -= 1;
            if md.outstanding == 0 {
                let start = md.busy_since.take().expect("busy model has a start");
                md.busy.push((start, t));
                md.idle_since = t;
            }
            self.outstanding -= 1;
        }
        if !res.completions.is_empty() {
            self.on_memory_freed(&gpus)?;
        }
        if self.draining.contains(&e) && !self.engines[e].has_work() {
            self.draining.remove(&e);
            self.deactivate(e)?;
        } else {
            self.make_ready(e);
        }
        for &g in &gpus {
            self.schedule_gpu(g)?;
        }
        if self.policy == PolicyKind::QlmTimeshare {
            self.qlm_assign()?;
        }
        Ok(())
    }

    fn on_memory_freed(&mut self, gpus: &[usize]) -> Result<(), SimError> {
        self.wake_gpus(gpus);
        // pending activations waiting on these GPUs
        for m in 0..self.models.len() {
            if let Placement::Pending(ref target) = self.models[m].place {
                if !target.iter().any(|g| gpus.contains(g)) {
                    continue;
                }
                let target = target.clone();
                let shard = self.shard_pages(m);
                let fits = target
                    .iter()
                    .all(|&g| self.ledgers[g].available_pages() + shard >= shard + self.reserve[g]);
                if fits {
                    for &g in &target {
                        self.reserve[g] -= shard;
                    }
                    self.start_activation(m, &target, ActivationMethod::Parallel, 0.0, true)?;
                }
            }
        }
        for &g in gpus {
            self.schedule_gpu(g)?;
        }
        Ok(())
    }

    // ---- activation and deactivation ----

    fn shard_pages(&self, m: usize) -> u64 {
        self.models[m].spec.weight_bytes_per_gpu().div_ceil(self.cfg.page_bytes)
    }

    /// Load model `m` onto `gpus` with a pooled engine of the home GPU,
    /// preferring one that has served the model before.
    fn start_activation(
        &mut self,
        m: usize,
        gpus: &[usize],
        method: ActivationMethod,
        extra_s: f64,
        counted: bool,
    ) -> Result<usize, SimError> {
        let home = gpus[0];
        let id = self.models[m].spec.id.clone();
        let pick = self.pooled[home]
            .iter()
            .position(|&e| self.engines[e].has_realigned(&id))
            .or(if self.pooled[home].is_empty() { None } else { Some(0) });
        let e = match pick {
            Some(i) => self.pooled[home].remove(i),
            None => {
                let e = self.engines.len();
                self.engines.push(Engine::new(e, home).with_reserve_fraction(self.cfg.sched.reserve_fraction));
                self.engine_model.push(None);
                self.stalled.push(false);
                self.in_ready.push(false);
                e
            }
        };
        let spec = self.models[m].spec.clone();
        let out = self.engines[e].activate(&spec, gpus, method, &self.cfg.activation, self.cfg.sched.realign_s, &mut self.ledgers)?;
        for (&g, &pool) in gpus.iter().zip(self.engines[e].pools()) {
            if let Some(&cap) = self.caps.get(&(id.clone(), g)) {
                self.ledgers[g].set_pool_cap(pool, Some(cap)).map_err(EngineError::from)?;
            }
        }
        self.engine_model[e] = Some(m);
        self.models[m].place = Placement::Resident(e);
        if counted {
            self.counts.activations += 1;
        }
        self.push(self.now + out.latency + SimTime::from_secs(extra_s), EventKind::ActivationDone, e as u64);
        let held = std::mem::take(&mut self.models[m].held);
        for r in held {
            self.route(r)?;
        }
        Ok(e)
    }

    fn on_activation_done(&mut self, e: usize) -> Result<(), SimError> {
        self.engines[e].finish_activation()?;
        let home = self.engines[e].home_gpu();
        self.schedule_gpu(home)?;
        self.make_ready(e);
        if self.policy == PolicyKind::QlmTimeshare {
            self.qlm_assign()?;
        }
        Ok(())
    }

    fn deactivate(&mut self, e: usize) -> Result<(), SimError> {
        let gpus = self.engines[e].gpus().to_vec();
        self.engines[e].deactivate(&mut self.ledgers)?;
        if let Some(m) = self.engine_model[e].take() {
            if self.models[m].place == Placement::Resident(e) {
                self.models[m].place = Placement::Evicted;
            }
        }
        self.stalled[e] = false;
        self.pooled[gpus[0]].push(e);
        self.on_memory_freed(&gpus)?;
        self.schedule_refills(&gpus);
        Ok(())
    }

    fn gpu_views(&self) -> Vec<GpuView> {
        let page = self.cfg.page_bytes;
        let t = self.now_s();
        let mut views: Vec<GpuView> = self
            .ledgers
            .iter()
            .enumerate()
            .map(|(g, l)| GpuView {
                gpu: g,
                capacity: l.capacity_bytes(),
                shared_kv: i128::from(l.capacity_bytes()) - i128::from((l.weight_pages() + self.reserve[g]) * page),
                w_req_rate: 0.0,
                models: Vec::new(),
            })
            .collect();
        for (m, md) in self.models.iter().enumerate() {
            let gpus: &[usize] = match &md.place {
                Placement::Resident(e) => self.engines[*e].gpus(),
                Placement::Pending(g) => g,
                Placement::Evicted => &[],
            };
            let tp = f64::from(md.spec.tp_degree);
            for &g in gpus {
                views[g].w_req_rate += self.decayed_rate(m, t) / md.spec.ttft_slo_s / tp;
                views[g].models.push(md.spec.id.clone());
            }
        }
        views
    }

    /// Find a GPU for an evicted model that just received a request.
    fn request_activation(&mut self, m: usize) -> Result<(), SimError> {
        if self.models[m].place != Placement::Evicted || self.models[m].held.is_empty() {
            return Ok(());
        }
        if !self.policy.activates_on_arrival() {
            self.unplaced.insert(m);
            return Ok(());
        }
        let shard = self.shard_pages(m);
        let tp = self.models[m].spec.tp_degree;
        let page = self.cfg.page_bytes;
        let mut choice = None;
        for attempt in 0..2 {
            let views = self.gpu_views();
            let free: Vec<u64> = views.iter().map(|v| v.shared_kv.max(0) as u64).collect();
            choice = activate_on_arrival(&views, &free, shard * page + 1, tp);
            if choice.is_some() || attempt == 1 || !self.evict_for_room(shard, tp)? {
                break;
            }
        }
        let Some(gpus) = choice else {
            self.unplaced.insert(m);
            return Ok(());
        };
        self.unplaced.remove(&m);
        if gpus.iter().all(|&g| self.headroom(g) >= shard) {
            self.start_activation(m, &gpus, ActivationMethod::Parallel, 0.0, true)?;
        } else {
            for &g in &gpus {
                self.reserve[g] += shard;
            }
            self.models[m].place = Placement::Pending(gpus);
            let held = std::mem::take(&mut self.models[m].held);
            for r in held {
                self.route(r)?;
            }
        }
        Ok(())
    }

    fn idle_models(&self) -> Vec<IdleModel> {
        let t = self.now_s();
        let page = self.cfg.page_bytes;
        let mut out = Vec::new();
        for (m, md) in self.models.iter().enumerate() {
            let Placement::Resident(e) = md.place else { continue };
            let eng = &self.engines[e];
            if md.outstanding > 0 || eng.status() != EngineStatus::Serving || eng.has_work() || eng.is_busy() {
                continue;
            }
            let kv = eng.pools().first().and_then(|&p| self.ledgers[eng.gpus()[0]].pool(p)).map_or(0, |p| p.mapped_pages());
            let _ = m;
            out.push(IdleModel {
                model: md.spec.id.clone(),
                gpus: eng.gpus().to_vec(),
                idle_s: t - md.idle_since,
                slo_s: md.spec.ttft_slo_s,
                pages_per_gpu: md.spec.weight_bytes_per_gpu().div_ceil(page) + kv,
            });
        }
        out
    }

    /// Evict idle models, largest SLO first, until a `tp`-GPU slot for
    /// `shard` weight pages opens up. Returns whether anything was evicted.
    fn evict_for_room(&mut self, shard: u64, tp: u32) -> Result<bool, SimError> {
        let mut idle = self.idle_models();
        idle.retain(|c| c.idle_s > self.cfg.sched.idle_threshold_s);
        idle.sort_by(|a, b| b.slo_s.total_cmp(&a.slo_s).then_with(|| a.model.cmp(&b.model)));
        let mut evicted = false;
        for c in idle {
            let views = self.gpu_views();
            let free: Vec<u64> = views.iter().map(|v| v.shared_kv.max(0) as u64).collect();
            if activate_on_arrival(&views, &free, shard * self.cfg.page_bytes + 1, tp).is_some() {
                break;
            }
            self.evict(&c.model)?;
            evicted = true;
        }
        Ok(evicted)
    }

    fn evict(&mut self, model: &str) -> Result<(), SimError> {
        let m = self.model_idx[model];
        if let Placement::Resident(e) = self.models[m].place {
            self.counts.evictions += 1;
            self.deactivate(e)?;
        }
        Ok(())
    }

    // ---- periodic scheduling ----

    fn live_kvpr(&self) -> Vec<f64> {
        self.gpu_views().iter().map(|v| kvpr(v.w_req_rate, v.shared_kv).unwrap_or(f64::INFINITY)).collect()
    }

    fn on_tick(&mut self) -> Result<(), SimError> {
        let t = self.now_s();
        let before = self.live_kvpr();
        let mut migrations = Vec::new();
        if self.policy.migrates() {
            let mut inputs = Vec::new();
            let mut current = BTreeMap::new();
            for (m, md) in self.models.iter().enumerate() {
                if let Placement::Resident(e) = md.place {
                    let gpus = self.engines[e].gpus().to_vec();
                    inputs.push(
                        PlacementInput::new(&md.spec.id, self.decayed_rate(m, t), md.spec.ttft_slo_s, md.spec.weight_bytes)
                            .with_tp(md.spec.tp_degree)
                            .on(&gpus),
                    );
                    current.insert(m, gpus);
                }
            }
            let caps = vec![self.cfg.gpu_capacity_bytes; self.cfg.gpu_count];
            if let Ok(plan) = place_models(&inputs, &caps, self.cfg.sched.tau) {
                for (m, from) in current {
                    let to = &plan.assignment[&self.models[m].spec.id];
                    if to != &from && self.migrate(m, &from, to)? {
                        migrations.push((self.models[m].spec.id.clone(), from, to.clone()));
                    }
                }
            }
        }
        let after = self.live_kvpr();
        for (g, &k) in after.iter().enumerate() {
            self.kvpr_series.push(KvprSample { time: t, gpu: g, kvpr: k });
        }
        let placement = self.placement_map();
        self.plan_log.push(PlanRecord { time: t, placement, migrations, evictions: Vec::new(), kvpr_before: before, kvpr_after: after });
        if self.policy.evicts() {
            self.push(self.now, EventKind::EvictionCheck, 0);
        }
        for m in self.unplaced.clone() {
            self.request_activation(m)?;
        }
        if self.outstanding > 0 || self.arrived < self.trace.len() {
            self.push(self.now + SimTime::from_secs(self.cfg.sched.tick_s), EventKind::SchedulerTick, 0);
        }
        Ok(())
    }

    fn placement_map(&self) -> BTreeMap<String, Vec<usize>> {
        self.models
            .iter()
            .filter_map(|md| match &md.place {
                Placement::Resident(e) => Some((md.spec.id.clone(), self.engines[*e].gpus().to_vec())),
                _ => None,
            })
            .collect()
    }

    /// Move a serving model: load it on `to`, send its unstarted requests
    /// there and drain the old engine.
    fn migrate(&mut self, m: usize, from: &[usize], to: &[usize]) -> Result<bool, SimError> {
        let Placement::Resident(old) = self.models[m].place else { return Ok(false) };
        if self.engines[old].status() != EngineStatus::Serving || to.iter().any(|g| from.contains(g)) {
            return Ok(false);
        }
        let shard = self.shard_pages(m);
        if !to.iter().all(|&g| self.headroom(g) >= shard) {
            return Ok(false);
        }
        self.counts.migrations += 1;
        self.engines[old].start_draining();
        let unstarted = self.engines[old].take_unstarted();
        let id = self.models[m].spec.id.clone();
        let old_home = from[0];
        let (moved, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.queues[old_home]).into_iter().partition(|q| q.model == id);
        self.queues[old_home] = keep;
        self.queue_dirty[old_home] = true;
        self.start_activation(m, to, ActivationMethod::Parallel, 0.0, true)?;
        let mut rerouted: Vec<usize> = moved.iter().map(|q| q.id as usize).chain(unstarted.iter().map(|r| r.id as usize)).collect();
        rerouted.sort_unstable();
        for r in rerouted {
            self.route(r)?;
        }
        if self.engines[old].has_work() || self.engines[old].is_busy() {
            self.draining.insert(old);
        } else {
            self.deactivate(old)?;
        }
        Ok(true)
    }

    fn on_eviction_check(&mut self) -> Result<(), SimError> {
        let mem: Vec<GpuMemory> = (0..self.ledgers.len())
            .map(|g| GpuMemory { gpu: g, capacity_pages: self.ledgers[g].capacity_pages(), free_pages: self.headroom(g) })
            .collect();
        let idle = self.idle_models();
        let pressure = PressurePredicate { free_fraction: self.cfg.sched.pressure_free_fraction };
        let evicted = eviction_tick(&mem, &idle, self.cfg.sched.idle_threshold_s, pressure);
        for model in &evicted {
            self.evict(model)?;
        }
        let t = self.now_s();
        if let Some(last) = self.plan_log.last_mut() {
            if last.time == t {
                last.evictions = evicted;
            }
        }
        Ok(())
    }

    // ---- time sharing ----

    fn gpu_idle_for_swap(&self, g: usize) -> bool {
        self.engines.iter().all(|e| {
            !e.gpus().contains(&g)
                || e.status() == EngineStatus::Pooled
                || (e.status() == EngineStatus::Serving && !e.has_work() && !e.is_busy())
        }) && self.queues[g].is_empty() && !self.draining.iter().any(|&e| self.engines[e].gpus().contains(&g))
    }

    /// Hand request groups to GPUs in strict FIFO order. The head group goes
    /// to the first idle GPUs whatever they hold; a model loaded elsewhere
    /// is drained there and swapped in. With no GPU idle the head group
    /// joins its model if loaded and otherwise blocks the groups behind it.
    fn qlm_assign(&mut self) -> Result<(), SimError> {
        loop {
            let Some(group) = self.groups.iter().next().cloned() else { break };
            let m = self.model_idx[&group.model];
            let tp = self.models[m].spec.tp_degree as usize;
            let idle: Vec<usize> = (0..self.ledgers.len()).filter(|&g| self.gpu_idle_for_swap(g)).take(tp).collect();
            let current = match self.models[m].place {
                Placement::Resident(e) => Some(e),
                _ => None,
            };
            let stay = match (&self.models[m].place, current) {
                (Placement::Pending(_), _) => true,
                (_, Some(e)) => {
                    idle.len() < tp || self.engines[e].status() != EngineStatus::Serving || self.engines[e].gpus() == idle.as_slice()
                }
                _ => false,
            };
            if stay {
                self.groups.remove(0);
                for r in group.requests {
                    self.route(r as usize)?;
                }
                continue;
            }
            if idle.len() < tp {
                break;
            }
            self.groups.remove(0);
            if let Some(old) = current {
                self.engines[old].start_draining();
                let unstarted = self.engines[old].take_unstarted();
                let home = self.engines[old].home_gpu();
                let (moved, keep): (Vec<_>, Vec<_>) =
                    std::mem::take(&mut self.queues[home]).into_iter().partition(|q| q.model == group.model);
                self.queues[home] = keep;
                self.queue_dirty[home] = true;
                self.models[m].held.extend(moved.iter().map(|q| q.id as usize).chain(unstarted.iter().map(|r| r.id as usize)));
                if self.engines[old].has_work() || self.engines[old].is_busy() {
                    self.draining.insert(old);
                } else {
                    self.deactivate(old)?;
                }
            }
            let mut from = None;
            for &g in &idle {
                let residents: Vec<usize> = (0..self.engines.len())
                    .filter(|&e| self.engines[e].gpus().contains(&g) && self.engines[e].status() == EngineStatus::Serving)
                    .collect();
                for e in residents {
                    if let Some(old) = self.engine_model[e] {
                        from.get_or_insert_with(|| self.models[old].spec.id.clone());
                    }
                    self.deactivate(e)?;
                }
            }
            self.counts.swaps += 1;
            self.swaps.push(SwapRecord { time: self.now_s(), gpu: idle[0], from, to: group.model.clone() });
            let init = self.cfg.sched.engine_init_s;
            self.models[m].held.extend(group.requests.iter().map(|&r| r as usize));
            self.models[m].held.sort_unstable();
            self.start_activation(m, &idle, ActivationMethod::Naive, init, true)?;
        }
        Ok(())
    }

    // ---- recording ----

    fn record_series(&mut self) {
        let t = self.now_s();
        for g in 0..self.ledgers.len() {
            let bytes = self.ledgers[g].mapped_pages() * self.cfg.page_bytes;
            if self.last_kv[g] != Some(bytes) {
                self.last_kv[g] = Some(bytes);
                self.kv_series.push(KvSample { time: t, gpu: g, mapped_bytes: bytes });
            }
        }
        for g in 0..self.queues.len() {
            if !std::mem::take(&mut self.queue_dirty[g]) {
                continue;
            }
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for q in &self.queues[g] {
                *counts.entry(self.model_idx[&q.model]).or_default() += 1;
            }
            for e in &self.engines {
                if e.home_gpu() == g && e.local_queue_len() > 0 {
                    if let Some(m) = e.model().map(|s| self.model_idx[&s.id]) {
                        *counts.entry(m).or_default() += e.local_queue_len();
                    }
                }
            }
            let keys: Vec<(usize, usize)> = self.last_q.keys().filter(|k| k.0 == g).copied().collect();
            for k in keys {
                counts.entry(k.1).or_default();
            }
            for (m, n) in counts {
                if self.last_q.get(&(g, m)) != Some(&n) {
                    self.last_q.insert((g, m), n);
                    self.queue_series.push(QueueSample { time: t, gpu: g, model: self.models[m].spec.id.clone(), queue_len: n });
                }
            }
        }
    }

    fn finish(mut self) -> SimOutput {
        let end = self.now_s();
        for md in &mut self.models {
            if let Some(start) = md.busy_since.take() {
                md.busy.push((start, end));
            }
        }
        let requests = self
            .trace
            .iter()
            .zip(&self.reqs)
            .enumerate()
            .map(|(i, (ev, r))| RequestRecord {
                req_id: i as u64,
                model: ev.model_id.clone(),
                arrival: SimTime::from_secs(ev.arrival_time).as_secs(),
                prompt: ev.prompt_tokens,
                output: ev.output_tokens,
                first_token: r.first.map(SimTime::as_secs),
                completion: r.done.map(SimTime::as_secs),
                preemptions: r.preemptions,
            })
            .collect();
        let slos = self
            .models
            .iter()
            .map(|m| (m.spec.id.clone(), Slo { ttft_s: m.spec.ttft_slo_s, tpot_s: m.spec.tpot_slo_s }))
            .collect();
        let busy = self.models.iter().map(|m| (m.spec.id.clone(), m.busy.clone())).collect();
        SimOutput {
            record: RunRecord {
                policy: self.policy.name().to_string(),
                seed: self.cfg.seed,
                gpu_count: self.cfg.gpu_count,
                slos,
                requests,
                busy,
                counts: self.counts,
                kv_series: self.kv_series,
                kvpr_series: self.kvpr_series,
                queue_series: self.queue_series,
                swaps: self.swaps,
                end_time: self.now.as_secs(),
                unfinished: self.outstanding,
            },
            plan_log: self.plan_log,
            event_log: self.log,
        }
    }
}
