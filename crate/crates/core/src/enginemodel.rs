//! Analytical model of one serving engine: chunked prefill interleaved with
//! decode, KV allocation through the page allocator, preemption when memory
//! runs out, and the activation/deactivation lifecycle of pooled engines.
//!
//! Iteration cost is linear in the tokens processed: `alpha + beta * tokens`.
//! The chunked-prefill speed used by the schedulers is derived from the same
//! constants, so a prefill estimate `p / c` is exactly what an uncontended
//! engine achieves on full chunks.

use crate::pagealloc::{PageAllocError, PhysicalLedger, PoolId, TokenSlotHandle};
use crate::time::SimTime;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, VecDeque};
use thiserror::Error;

pub const GB: f64 = 1e9;
pub const KIB: u64 = 1024;

pub const DEFAULT_ALPHA_S: f64 = 0.006;
pub const DEFAULT_BETA_S: f64 = 0.000_015;
/// Closed-loop (prompt, output) mix used for memory-vs-throughput curves.
pub const DEFAULT_THROUGHPUT_MIX: [(u32, u32); 2] = [(512, 256), (2048, 1024)];
pub const DEFAULT_CHUNK_SIZE: u32 = 512;
pub const DEFAULT_RESERVE_FRACTION: f64 = 0.05;
pub const DEFAULT_ENGINE_INIT_S: f64 = 5.0;
pub const DEFAULT_REALIGN_S: f64 = 0.05;

fn default_alpha() -> f64 {
    DEFAULT_ALPHA_S
}
fn default_beta() -> f64 {
    DEFAULT_BETA_S
}
fn default_chunk() -> u32 {
    DEFAULT_CHUNK_SIZE
}
fn default_tp() -> u32 {
    1
}

/// Static description of a served model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub id: String,
    pub weight_bytes: u64,
    /// KV bytes per token across all layers.
    pub token_kv_bytes: u64,
    #[serde(default = "default_chunk")]
    pub chunk_size: u32,
    pub ttft_slo_s: f64,
    pub tpot_slo_s: f64,
    #[serde(default = "default_tp")]
    pub tp_degree: u32,
    /// Fixed per-iteration cost (alpha), seconds.
    #[serde(default = "default_alpha")]
    pub iter_base_s: f64,
    /// Marginal cost per processed token (beta), seconds.
    #[serde(default = "default_beta")]
    pub iter_per_token_s: f64,
}

impl ModelSpec {
    fn preset(id: &str, weight_gb: f64, token_kib: u64, tp: u32) -> Self {
        ModelSpec {
            id: id.to_string(),
            weight_bytes: (weight_gb * GB) as u64,
            token_kv_bytes: token_kib * KIB,
            chunk_size: DEFAULT_CHUNK_SIZE,
            ttft_slo_s: 1.0,
            tpot_slo_s: 0.1,
            tp_degree: tp,
            iter_base_s: DEFAULT_ALPHA_S,
            iter_per_token_s: DEFAULT_BETA_S,
        }
    }

    /// 1B-class: 16 layers, 8 KV heads of dim 64, bf16.
    pub fn class_1b(id: &str) -> Self {
        Self::preset(id, 2.5, 32, 1)
    }
    /// 3B-class: 28 layers, 8 KV heads of dim 128.
    pub fn class_3b(id: &str) -> Self {
        Self::preset(id, 6.4, 112, 1)
    }
    /// 8B-class: 32 layers, 8 KV heads of dim 128.
    pub fn class_8b(id: &str) -> Self {
        Self::preset(id, 16.0, 128, 1)
    }
    /// 14B-class: 48 layers.
    pub fn class_14b(id: &str) -> Self {
        Self::preset(id, 28.0, 192, 1)
    }
    /// 70B-class: 80 layers, served with tensor parallelism 8.
    pub fn class_70b(id: &str) -> Self {
        Self::preset(id, 140.0, 320, 8)
    }

    pub fn with_slos(mut self, ttft_s: f64, tpot_s: f64) -> Self {
        self.ttft_slo_s = ttft_s;
        self.tpot_slo_s = tpot_s;
        self
    }

    /// Chunked-prefill speed in tokens/s for an otherwise idle engine.
    pub fn prefill_speed(&self) -> f64 {
        let chunk = f64::from(self.chunk_size);
        chunk / (self.iter_base_s + self.iter_per_token_s * chunk)
    }

    pub fn iteration_time(&self, tokens: u64) -> f64 {
        self.iter_base_s + self.iter_per_token_s * tokens as f64
    }

    /// Per-GPU share of the weights under tensor parallelism.
    pub fn weight_bytes_per_gpu(&self) -> u64 {
        self.weight_bytes.div_ceil(u64::from(self.tp_degree))
    }

    pub fn token_kv_bytes_per_gpu(&self) -> u64 {
        self.token_kv_bytes.div_ceil(u64::from(self.tp_degree))
    }

    pub fn validate(&self) -> Result<(), String> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if self.id.is_empty() {
            return Err("model id must be non-empty".into());
        }
        if self.weight_bytes == 0 || self.token_kv_bytes == 0 || self.chunk_size == 0 || self.tp_degree == 0 {
            return Err(format!("{}: sizes, chunk_size and tp_degree must be positive", self.id));
        }
        if !(pos(self.ttft_slo_s) && pos(self.tpot_slo_s)) {
            return Err(format!("{}: SLOs must be positive", self.id));
        }
        if !(pos(self.iter_base_s) && self.iter_per_token_s.is_finite() && self.iter_per_token_s >= 0.0) {
            return Err(format!("{}: iteration cost constants must be positive", self.id));
        }
        Ok(())
    }
}

/// Prefill time of a `prompt`-token request at chunked-prefill speed `speed`.
pub fn exec_estimate(prompt: u32, speed: f64) -> f64 {
    f64::from(prompt) / speed
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationMethod {
    /// Single-stream host-to-device copy.
    Naive,
    /// Weights chunked and loaded over several links, then gathered.
    Parallel,
}

/// Measured weight-load latency anchors for one (tp degree, method) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationCurve {
    pub tp_degree: u32,
    pub method: ActivationMethod,
    /// `(total weight GB, seconds)`, sorted by size.
    pub points: Vec<(f64, f64)>,
}

impl ActivationCurve {
    fn eval(&self, weight_gb: f64) -> f64 {
        let pts = &self.points;
        match pts.len() {
            0 => 0.0,
            1 => pts[0].1 * weight_gb / pts[0].0,
            n => {
                let i = pts.iter().position(|p| p.0 >= weight_gb).unwrap_or(n - 1).clamp(1, n - 1);
                let (x0, y0) = pts[i - 1];
                let (x1, y1) = pts[i];
                y0 + (y1 - y0) * (weight_gb - x0) / (x1 - x0)
            }
        }
    }
}

/// Weight-load latency model. Sizes between anchors interpolate linearly
/// in weight bytes; outside them the nearest segment is extended (a single
/// anchor scales proportionally). TP degrees without their own curve load
/// each shard concurrently with the single-GPU curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationParams {
    pub curves: Vec<ActivationCurve>,
    pub min_latency_s: f64,
}

impl Default for ActivationParams {
    fn default() -> Self {
        use ActivationMethod::*;
        ActivationParams {
            curves: vec![
                ActivationCurve { tp_degree: 1, method: Parallel, points: vec![(16.0, 0.7), (28.0, 1.3)] },
                ActivationCurve { tp_degree: 1, method: Naive, points: vec![(16.0, 4.97), (28.0, 7.1)] },
                ActivationCurve { tp_degree: 8, method: Parallel, points: vec![(140.0, 1.5)] },
                ActivationCurve { tp_degree: 8, method: Naive, points: vec![(140.0, 7.2)] },
            ],
            min_latency_s: 0.1,
        }
    }
}

impl ActivationParams {
    pub fn latency(&self, weight_bytes: u64, tp_degree: u32, method: ActivationMethod) -> f64 {
        let gb = weight_bytes as f64 / GB;
        let curve = |tp: u32| self.curves.iter().find(|c| c.tp_degree == tp && c.method == method);
        let secs = match curve(tp_degree) {
            Some(c) => c.eval(gb),
            None => match curve(1) {
                Some(c) => c.eval(gb / f64::from(tp_degree.max(1))),
                None => 0.0,
            },
        };
        secs.max(self.min_latency_s)
    }

    pub fn latency_for(&self, spec: &ModelSpec, method: ActivationMethod) -> f64 {
        self.latency(spec.weight_bytes, spec.tp_degree, method)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("engine {engine} is {found:?}, expected {expected}")]
    InvalidState { engine: usize, found: EngineStatus, expected: &'static str },
    #[error("engine {engine} still holds {requests} live requests")]
    LiveRequests { engine: usize, requests: usize },
    #[error("{0}")]
    Memory(#[from] PageAllocError),
    #[error("model {model} spans {tp} GPUs but {given} were given")]
    GpuCount { model: String, tp: u32, given: usize },
    #[error("KV budget of {budget} bytes cannot hold one {need}-byte request")]
    BudgetTooSmall { budget: u64, need: u64 },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineStatus {
    Pooled,
    Aligning,
    Loading,
    Serving,
    Draining,
}

/// A request while it is owned by an engine.
#[derive(Debug, Clone)]
pub struct EngineRequest {
    pub id: u64,
    pub prompt: u32,
    pub output: u32,
    /// Tokens to prefill: the prompt, or prompt plus already generated
    /// tokens when recomputing after preemption.
    context: u32,
    prefilled: u32,
    generated: u32,
    handles: Vec<Vec<TokenSlotHandle>>,
    admitted: (SimTime, u64),
    pub preemptions: u32,
}

impl EngineRequest {
    pub fn new(id: u64, prompt: u32, output: u32) -> Self {
        EngineRequest {
            id,
            prompt,
            output,
            context: prompt,
            prefilled: 0,
            generated: 0,
            handles: Vec::new(),
            admitted: (SimTime::ZERO, 0),
            preemptions: 0,
        }
    }

    pub fn generated(&self) -> u32 {
        self.generated
    }
    pub fn prefilled(&self) -> u32 {
        self.prefilled
    }
    pub fn remaining_prefill(&self) -> u32 {
        self.context - self.prefilled
    }
    /// Live KV slots held (per TP part).
    pub fn kv_tokens(&self) -> usize {
        self.handles.first().map_or(0, Vec::len)
    }
    fn in_decode(&self) -> bool {
        self.prefilled == self.context && self.generated >= 1 && self.generated < self.output
    }
}

#[derive(Debug, Clone)]
struct ActiveModel {
    spec: ModelSpec,
    gpus: Vec<usize>,
    pools: Vec<PoolId>,
}

#[derive(Debug, Clone, Default)]
struct InFlight {
    duration: SimTime,
    decode: Vec<u64>,
    first_token: Vec<u64>,
}

/// What an iteration will do, decided when it starts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationPlan {
    pub duration: SimTime,
    pub chunk_tokens: u64,
    pub decode_tokens: u64,
    pub batch_size: usize,
    pub preempted: Vec<u64>,
    pub direct_maps: u64,
}

impl IterationPlan {
    pub fn tokens(&self) -> u64 {
        self.chunk_tokens + self.decode_tokens
    }
    /// No token could be processed; the engine must wait for memory.
    pub fn is_stalled(&self) -> bool {
        self.tokens() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub id: u64,
    pub preemptions: u32,
}

/// Token emissions at the end of an iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationResult {
    pub first_tokens: Vec<u64>,
    pub decoded: Vec<u64>,
    pub completions: Vec<Completion>,
    pub pages_unmapped: u64,
}

/// Combined begin/finish view of one iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationOutcome {
    pub plan: IterationPlan,
    pub result: IterationResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationOutcome {
    pub latency: SimTime,
    pub realign: SimTime,
    pub load: SimTime,
}

/// A serving-engine shell living on one GPU. While serving a TP model it
/// also drives KV pools on the model's other GPUs.
#[derive(Debug, Clone)]
pub struct Engine {
    id: usize,
    home_gpu: usize,
    status: EngineStatus,
    active: Option<ActiveModel>,
    local_queue: VecDeque<EngineRequest>,
    running: Vec<EngineRequest>,
    realigned: BTreeSet<String>,
    admit_counter: u64,
    in_flight: Option<InFlight>,
    reserve_fraction: f64,
    clock: SimTime,
}

impl Engine {
    pub fn new(id: usize, home_gpu: usize) -> Self {
        Engine {
            id,
            home_gpu,
            status: EngineStatus::Pooled,
            active: None,
            local_queue: VecDeque::new(),
            running: Vec::new(),
            realigned: BTreeSet::new(),
            admit_counter: 0,
            in_flight: None,
            reserve_fraction: DEFAULT_RESERVE_FRACTION,
            clock: SimTime::ZERO,
        }
    }

    pub fn with_reserve_fraction(mut self, f: f64) -> Self {
        self.reserve_fraction = f;
        self
    }

    pub fn id(&self) -> usize {
        self.id
    }
    /// Current simulated time, used to order admissions across engines.
    pub fn set_now(&mut self, now: SimTime) {
        self.clock = now;
    }
    pub fn home_gpu(&self) -> usize {
        self.home_gpu
    }
    pub fn status(&self) -> EngineStatus {
        self.status
    }
    pub fn model(&self) -> Option<&ModelSpec> {
        self.active.as_ref().map(|a| &a.spec)
    }
    pub fn gpus(&self) -> &[usize] {
        self.active.as_ref().map_or(&[], |a| a.gpus.as_slice())
    }
    pub fn pools(&self) -> &[PoolId] {
        self.active.as_ref().map_or(&[], |a| a.pools.as_slice())
    }
    pub fn running(&self) -> &[EngineRequest] {
        &self.running
    }
    pub fn local_queue_len(&self) -> usize {
        self.local_queue.len()
    }
    pub fn is_busy(&self) -> bool {
        self.in_flight.is_some()
    }
    pub fn has_work(&self) -> bool {
        !self.running.is_empty() || !self.local_queue.is_empty()
    }
    pub fn live_requests(&self) -> usize {
        self.running.len() + self.local_queue.len()
    }
    pub fn has_realigned(&self, layout: &str) -> bool {
        self.realigned.contains(layout)
    }

    /// Prefill tokens dispatched to this engine and not yet processed.
    pub fn pending_prefill_tokens(&self) -> u64 {
        self.running.iter().map(|r| u64::from(r.remaining_prefill())).sum::<u64>()
            + self.local_queue.iter().map(|r| u64::from(r.remaining_prefill())).sum::<u64>()
    }

    /// Prefill tokens still to process per token of prefill speed; the
    /// residual work ahead of anything newly dispatched.
    pub fn pending_prefill_secs(&self) -> f64 {
        match self.model() {
            Some(m) => self.pending_prefill_tokens() as f64 / m.prefill_speed(),
            None => 0.0,
        }
    }

    /// Pages held back for decode growth of the running batch.
    pub fn reserved_buffer_pages(&self, ledgers: &[PhysicalLedger]) -> u64 {
        match &self.active {
            Some(a) => {
                let mapped = ledgers[a.gpus[0]].pool(a.pools[0]).map_or(0, |p| p.mapped_pages());
                (mapped as f64 * self.reserve_fraction).ceil() as u64
            }
            None => 0,
        }
    }

    /// Total KV tokens held by the engine's requests (per TP part).
    pub fn kv_tokens(&self) -> usize {
        self.running.iter().map(EngineRequest::kv_tokens).sum()
    }

    pub fn enqueue(&mut self, req: EngineRequest) -> Result<(), EngineError> {
        match self.status {
            EngineStatus::Serving => {
                self.local_queue.push_back(req);
                Ok(())
            }
            found => Err(EngineError::InvalidState { engine: self.id, found, expected: "serving" }),
        }
    }

    /// Stop accepting work; running requests continue to completion.
    pub fn start_draining(&mut self) {
        if self.status == EngineStatus::Serving {
            self.status = EngineStatus::Draining;
        }
    }

    /// Take back requests that have not started prefill (used when a model
    /// is migrated or evicted).
    pub fn take_unstarted(&mut self) -> Vec<EngineRequest> {
        let (keep, out): (VecDeque<_>, VecDeque<_>) =
            self.local_queue.drain(..).partition(|r| r.prefilled > 0 || r.generated > 0);
        self.local_queue = keep;
        out.into_iter().collect()
    }

    /// Load `spec` onto this pooled engine: realign the virtual KV space if
    /// this engine has not seen the model's layout, reserve page-rounded
    /// weights on every GPU the model spans, and create its KV pools.
    pub fn activate(
        &mut self,
        spec: &ModelSpec,
        gpus: &[usize],
        method: ActivationMethod,
        params: &ActivationParams,
        realign_s: f64,
        ledgers: &mut [PhysicalLedger],
    ) -> Result<ActivationOutcome, EngineError> {
        if self.status != EngineStatus::Pooled {
            return Err(EngineError::InvalidState { engine: self.id, found: self.status, expected: "pooled" });
        }
        if gpus.len() != spec.tp_degree as usize {
            return Err(EngineError::GpuCount { model: spec.id.clone(), tp: spec.tp_degree, given: gpus.len() });
        }
        let w = spec.weight_bytes_per_gpu();
        for (i, &g) in gpus.iter().enumerate() {
            if let Err(e) = ledgers[g].reserve_weights(&spec.id, w) {
                for &done in &gpus[..i] {
                    ledgers[done].release_weights(&spec.id).ok();
                }
                return Err(e.into());
            }
        }
        let mut pools = Vec::with_capacity(gpus.len());
        for &g in gpus {
            let virt = ledgers[g].capacity_pages().min(u64::from(u32::MAX)) as u32;
            match ledgers[g].alloc_kvcache(&spec.id, spec.token_kv_bytes_per_gpu(), virt.max(1)) {
                Ok(p) => pools.push(p),
                Err(e) => {
                    for (&pg, &p) in gpus.iter().zip(&pools) {
                        ledgers[pg].free_kvcache(p).ok();
                    }
                    for &g in gpus {
                        ledgers[g].release_weights(&spec.id).ok();
                    }
                    return Err(e.into());
                }
            }
        }
        let realign = if self.realigned.insert(spec.id.clone()) { realign_s } else { 0.0 };
        let load = params.latency_for(spec, method);
        self.status = if realign > 0.0 { EngineStatus::Aligning } else { EngineStatus::Loading };
        self.active = Some(ActiveModel { spec: spec.clone(), gpus: gpus.to_vec(), pools });
        Ok(ActivationOutcome {
            latency: SimTime::from_secs(realign) + SimTime::from_secs(load),
            realign: SimTime::from_secs(realign),
            load: SimTime::from_secs(load),
        })
    }

    pub fn finish_activation(&mut self) -> Result<(), EngineError> {
        match self.status {
            EngineStatus::Aligning | EngineStatus::Loading => {
                self.status = EngineStatus::Serving;
                Ok(())
            }
            found => Err(EngineError::InvalidState { engine: self.id, found, expected: "aligning or loading" }),
        }
    }

    /// Return a drained engine to the pool: unmap its KV, release weights.
    /// The realignment cache survives.
    pub fn deactivate(&mut self, ledgers: &mut [PhysicalLedger]) -> Result<u64, EngineError> {
        if !matches!(self.status, EngineStatus::Serving | EngineStatus::Draining) {
            return Err(EngineError::InvalidState { engine: self.id, found: self.status, expected: "serving or draining" });
        }
        if self.has_work() || self.in_flight.is_some() {
            return Err(EngineError::LiveRequests { engine: self.id, requests: self.live_requests() });
        }
        let active = self.active.take().expect("serving engine has a model");
        let mut released = 0;
        for (&g, &p) in active.gpus.iter().zip(&active.pools) {
            released += ledgers[g].free_kvcache(p)?;
            ledgers[g].release_weights(&active.spec.id)?;
        }
        self.status = EngineStatus::Pooled;
        Ok(released)
    }

    fn check_parts(&self, ledgers: &[PhysicalLedger], tokens: u64) -> bool {
        let a = self.active.as_ref().expect("active");
        a.gpus.iter().zip(&a.pools).all(|(&g, &p)| ledgers[g].check_alloc(p, tokens).is_ok())
    }

    /// Allocate `tokens` on every TP part, all or nothing. Returns one
    /// handle list per part plus the number of directly mapped pages.
    fn alloc_parts(&self, ledgers: &mut [PhysicalLedger], tokens: u64) -> Option<(Vec<Vec<TokenSlotHandle>>, u64)> {
        if !self.check_parts(ledgers, tokens) {
            // record the failure on the home ledger's log
            let a = self.active.as_ref().expect("active");
            ledgers[a.gpus[0]].alloc_kv(a.pools[0], tokens).err();
            return None;
        }
        let a = self.active.as_ref().expect("active");
        let mut parts = Vec::with_capacity(a.gpus.len());
        let mut direct = 0;
        for (&g, &p) in a.gpus.iter().zip(&a.pools) {
            let alloc = ledgers[g].alloc_kv(p, tokens).expect("checked");
            direct = direct.max(alloc.direct_maps);
            parts.push(alloc.handles);
        }
        Some((parts, direct))
    }

    fn release(&self, ledgers: &mut [PhysicalLedger], req: &mut EngineRequest) -> u64 {
        let a = self.active.as_ref().expect("active");
        let mut unmapped = 0;
        for ((&g, &p), handles) in a.gpus.iter().zip(&a.pools).zip(req.handles.drain(..)) {
            unmapped += ledgers[g].free_kv(p, &handles).expect("engine-owned handles are live");
        }
        unmapped
    }

    /// Admission stamp of the most recently admitted running request.
    pub fn youngest_admission(&self) -> Option<(SimTime, u64)> {
        self.running.iter().map(|r| r.admitted).max()
    }

    /// Preempt the most recently admitted running request (recomputed
    /// later). Used to break memory deadlocks between stalled engines.
    pub fn preempt_youngest(&mut self, ledgers: &mut [PhysicalLedger]) -> Option<u64> {
        if self.in_flight.is_some() {
            return None;
        }
        self.preempt_latest(ledgers)
    }

    fn preempt_latest(&mut self, ledgers: &mut [PhysicalLedger]) -> Option<u64> {
        let idx = (0..self.running.len()).max_by_key(|&i| self.running[i].admitted)?;
        let mut victim = self.running.remove(idx);
        self.release(ledgers, &mut victim);
        victim.context = victim.prompt + victim.generated;
        victim.prefilled = 0;
        victim.preemptions += 1;
        let id = victim.id;
        self.local_queue.push_front(victim);
        Some(id)
    }

    /// Start one iteration at the current time. Decode slots are allocated
    /// first, preempting the most recently admitted requests on failure;
    /// then a prefill chunk of up to `chunk_size` tokens is taken from
    /// in-progress prefills and the local queue head. Prefill pauses on
    /// allocation failure and is skipped entirely after a preemption.
    pub fn begin_iteration(&mut self, ledgers: &mut [PhysicalLedger]) -> Result<IterationPlan, EngineError> {
        if self.status != EngineStatus::Serving && self.status != EngineStatus::Draining {
            return Err(EngineError::InvalidState { engine: self.id, found: self.status, expected: "serving" });
        }
        if self.in_flight.is_some() {
            return Err(EngineError::Invalid(format!("engine {} already has an iteration in flight", self.id)));
        }
        let spec = self.active.as_ref().expect("serving engine has a model").spec.clone();
        let mut plan = IterationPlan::default();
        let mut flight = InFlight::default();

        loop {
            let decode: Vec<usize> = (0..self.running.len()).filter(|&i| self.running[i].in_decode()).collect();
            if decode.is_empty() {
                break;
            }
            match self.alloc_parts(ledgers, decode.len() as u64) {
                Some((mut parts, direct)) => {
                    plan.direct_maps += direct;
                    for &i in decode.iter().rev() {
                        for (part, handles) in parts.iter_mut().enumerate() {
                            let h = handles.pop().expect("one slot per request");
                            self.running[i].handles[part].push(h);
                        }
                        flight.decode.push(self.running[i].id);
                    }
                    flight.decode.reverse();
                    plan.decode_tokens = decode.len() as u64;
                    break;
                }
                None => {
                    let v = self.preempt_latest(ledgers).expect("decode set is non-empty");
                    plan.preempted.push(v);
                }
            }
        }

        if plan.preempted.is_empty() {
            let mut budget = u64::from(spec.chunk_size);
            let mut i = 0;
            'prefill: while budget > 0 {
                if i == self.running.len() {
                    let Some(mut next) = self.local_queue.pop_front() else { break };
                    self.admit_counter += 1;
                    next.admitted = (self.clock, self.admit_counter);
                    next.handles = vec![Vec::new(); self.gpus().len()];
                    self.running.push(next);
                }
                let r = &self.running[i];
                if r.remaining_prefill() == 0 {
                    i += 1;
                    continue;
                }
                let take = budget.min(u64::from(r.remaining_prefill()));
                let completes = take == u64::from(r.remaining_prefill());
                let first_token = completes && r.generated == 0;
                let slots = take + u64::from(first_token);
                match self.alloc_parts(ledgers, slots) {
                    Some((parts, direct)) => {
                        plan.direct_maps += direct;
                        let r = &mut self.running[i];
                        for (part, mut handles) in parts.into_iter().enumerate() {
                            r.handles[part].append(&mut handles);
                        }
                        r.prefilled += take as u32;
                        if first_token {
                            flight.first_token.push(r.id);
                        }
                        plan.chunk_tokens += take;
                        budget -= take;
                        i += 1;
                    }
                    None => {
                        // un-admit a request that got nothing this round
                        if self.running[i].prefilled == 0 && self.running[i].kv_tokens() == 0 {
                            let mut back = self.running.remove(i);
                            back.handles.clear();
                            self.local_queue.push_front(back);
                        }
                        break 'prefill;
                    }
                }
            }
        }

        plan.batch_size = self.running.len();
        if plan.is_stalled() {
            return Ok(plan);
        }
        let map_cost = ledgers[self.home_gpu].map_latency().micros() * plan.direct_maps;
        plan.duration = SimTime::from_secs(spec.iteration_time(plan.tokens())) + SimTime(map_cost);
        flight.duration = plan.duration;
        self.in_flight = Some(flight);
        Ok(plan)
    }

    /// Finish the in-flight iteration: emit first tokens, advance decodes,
    /// complete finished requests and free their KV.
    pub fn finish_iteration(&mut self, ledgers: &mut [PhysicalLedger]) -> Result<IterationResult, EngineError> {
        let flight = self
            .in_flight
            .take()
            .ok_or_else(|| EngineError::Invalid(format!("engine {} has no iteration in flight", self.id)))?;
        let mut out = IterationResult::default();
        for r in self.running.iter_mut() {
            if flight.first_token.contains(&r.id) {
                r.generated = 1;
                out.first_tokens.push(r.id);
            } else if flight.decode.contains(&r.id) {
                r.generated += 1;
                out.decoded.push(r.id);
            }
        }
        let mut i = 0;
        while i < self.running.len() {
            let r = &self.running[i];
            if r.prefilled == r.context && r.generated >= r.output {
                let mut done = self.running.remove(i);
                out.pages_unmapped += self.release(ledgers, &mut done);
                out.completions.push(Completion { id: done.id, preemptions: done.preemptions });
            } else {
                i += 1;
            }
        }
        Ok(out)
    }

    /// Run one whole iteration (begin and finish back to back).
    pub fn step(&mut self, ledgers: &mut [PhysicalLedger]) -> Result<IterationOutcome, EngineError> {
        let plan = self.begin_iteration(ledgers)?;
        if plan.is_stalled() {
            return Ok(IterationOutcome { plan, result: IterationResult::default() });
        }
        let result = self.finish_iteration(ledgers)?;
        Ok(IterationOutcome { plan, result })
    }
}

/// Steady-state generated tokens per second of one engine whose KV pool is
/// capped at `kv_budget_bytes`, fed a saturating closed-loop stream that
/// cycles through `mix` (prompt, output) pairs.
pub fn throughput_of(kv_budget_bytes: u64, spec: &ModelSpec, mix: &[(u32, u32)]) -> Result<f64, EngineError> {
    const WARMUP_S: f64 = 30.0;
    const MEASURE_S: f64 = 120.0;
    if mix.is_empty() {
        return Err(EngineError::Invalid("workload mix is empty".into()));
    }
    let page = crate::pagealloc::DEFAULT_PAGE_BYTES;
    let single = ModelSpec { tp_degree: 1, ..spec.clone() };
    let tpp = page / single.token_kv_bytes;
    let need = mix
        .iter()
        .map(|&(p, o)| u64::from(p + o).div_ceil(tpp) * page)
        .max()
        .unwrap_or(0);
    if kv_budget_bytes < need {
        return Err(EngineError::BudgetTooSmall { budget: kv_budget_bytes, need });
    }
    let weight_pages = single.weight_bytes.div_ceil(page);
    let budget_pages = kv_budget_bytes / page;
    let mut ledgers = vec![PhysicalLedger::new(0, (weight_pages + budget_pages) * page, page)];
    let mut engine = Engine::new(0, 0);
    engine.activate(&single, &[0], ActivationMethod::Parallel, &ActivationParams::default(), 0.0, &mut ledgers)?;
    engine.finish_activation()?;

    let mut next_id = 0u64;
    let mut now = 0.0;
    let mut measured = 0u64;
    while now < WARMUP_S + MEASURE_S {
        while engine.local_queue_len() < 64 {
            let (p, o) = mix[next_id as usize % mix.len()];
            engine.enqueue(EngineRequest::new(next_id, p, o))?;
            next_id += 1;
        }
        let out = engine.step(&mut ledgers)?;
        if out.plan.is_stalled() {
            return Err(EngineError::Invalid("engine stalled with an empty GPU".into()));
        }
        now += out.plan.duration.as_secs();
        if now > WARMUP_S {
            measured += (out.result.first_tokens.len() + out.result.decoded.len()) as u64;
        }
        ledgers[0].refill_buffer(crate::pagealloc::DEFAULT_BUFFER_TARGET_PAGES);
    }
    Ok(measured as f64 / MEASURE_S)
}
