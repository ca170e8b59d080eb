//! Cluster-level placement: balance KV pressure (SLO-weighted request rate
//! per GB of KV-available memory) across GPUs, gate migrations by a minimum
//! improvement, evict idle models under memory pressure and pick a GPU for
//! models activated by an arriving request.

use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_PRESSURE_FREE_FRACTION: f64 = 0.10;
pub const DEFAULT_IDLE_THRESHOLD_S: f64 = 10.0;

const BYTES_PER_GB: f64 = 1e9;

#[derive(Debug, Error, PartialEq)]
pub enum GlobalSchedError {
    #[error("KV pressure undefined: shared KV is {0} bytes")]
    UndefinedPressure(i128),
    #[error("model {model} fits no GPU")]
    Infeasible { model: String },
    #[error("model {model} needs {tp} distinct GPUs, cluster has {gpus}")]
    TooFewGpus { model: String, tp: u32, gpus: usize },
    #[error("invalid placement input: {0}")]
    Invalid(String),
}

/// KV pressure ratio in demand per GB.
pub fn kvpr(w_req_rate: f64, shared_kv_bytes: i128) -> Result<f64, GlobalSchedError> {
    if shared_kv_bytes <= 0 {
        return Err(GlobalSchedError::UndefinedPressure(shared_kv_bytes));
    }
    Ok(w_req_rate / (shared_kv_bytes as f64 / BYTES_PER_GB))
}

/// A model as seen by the placement step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlacementInput {
    pub id: String,
    /// Measured request rate, req/s.
    pub rate: f64,
    /// TTFT SLO, seconds.
    pub slo_s: f64,
    pub weight_bytes: u64,
    pub tp_degree: u32,
    /// Current GPU of each TP part; empty when the model is unplaced.
    pub current: Vec<usize>,
}

impl PlacementInput {
    pub fn new(id: impl Into<String>, rate: f64, slo_s: f64, weight_bytes: u64) -> Self {
        PlacementInput { id: id.into(), rate, slo_s, weight_bytes, tp_degree: 1, current: Vec::new() }
    }
    pub fn on(mut self, gpus: &[usize]) -> Self {
        self.current = gpus.to_vec();
        self
    }
    pub fn with_tp(mut self, tp: u32) -> Self {
        self.tp_degree = tp;
        self
    }
    pub fn priority(&self) -> f64 {
        self.rate / self.slo_s
    }
}

/// One placement unit: a whole model, or one tensor-parallel shard.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartSpec {
    pub model: String,
    pub part: u32,
    pub weight_bytes: u64,
    pub rate: f64,
    pub slo_s: f64,
    pub current: Option<usize>,
}

impl PartSpec {
    pub fn priority(&self) -> f64 {
        self.rate / self.slo_s
    }
}

/// Split a model into `tp_degree` parts carrying `w/tp` weight and `r/tp`
/// rate each, so every part has the model's `r/s` key divided evenly.
pub fn tp_decompose(m: &PlacementInput) -> Vec<PartSpec> {
    let tp = m.tp_degree.max(1);
    let w = m.weight_bytes.div_ceil(u64::from(tp));
    (0..tp)
        .map(|i| PartSpec {
            model: m.id.clone(),
            part: i,
            weight_bytes: w,
            rate: m.rate / f64::from(tp),
            slo_s: m.slo_s,
            current: m.current.get(i as usize).copied(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GpuView {
    pub gpu: usize,
    pub capacity: u64,
    /// Capacity minus the weights of models placed here.
    pub shared_kv: i128,
    pub w_req_rate: f64,
    pub models: Vec<String>,
}

impl GpuView {
    pub fn empty(gpu: usize, capacity: u64) -> Self {
        GpuView { gpu, capacity, shared_kv: i128::from(capacity), w_req_rate: 0.0, models: Vec::new() }
    }
    /// KV pressure; infinite when no KV memory remains.
    pub fn kvpr(&self) -> f64 {
        kvpr(self.w_req_rate, self.shared_kv).unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Migration {
    pub model: String,
    pub part: u32,
    pub from: usize,
    pub to: usize,
}

/// The GPU with the largest final pressure and what its last assignment
/// looked like; these feed the greedy's approximation bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalGpu {
    pub gpu: usize,
    pub last_model: String,
    pub shared_before: i128,
    pub last_weight: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlacementPlan {
    pub assignment: BTreeMap<String, Vec<usize>>,
    pub gpus: Vec<GpuView>,
    pub migrations: Vec<Migration>,
    pub critical: Option<CriticalGpu>,
}

impl PlacementPlan {
    pub fn max_kvpr(&self) -> f64 {
        self.gpus.iter().map(GpuView::kvpr).fold(0.0, f64::max)
    }
    pub fn kvpr_vector(&self) -> Vec<f64> {
        self.gpus.iter().map(GpuView::kvpr).collect()
    }
    pub fn gpus_of(&self, model: &str) -> Option<&[usize]> {
        self.assignment.get(model).map(Vec::as_slice)
    }
    /// `OPT * (1 + C / (S_before - w_k))` read off the critical GPU.
    pub fn bound_factor(&self) -> Option<f64> {
        let c = self.critical.as_ref()?;
        let cap = self.gpus[c.gpu].capacity as f64;
        let denom = c.shared_before as f64 - c.last_weight as f64;
        Some(1.0 + cap / denom)
    }
}

/// Greedy KV-pressure balancing. Parts are visited by `r/s` descending
/// (model id, then part index ascending on ties); each goes to the
/// lowest-pressure GPU that can hold its weights and has no sibling part,
/// unless it is already placed and moving would improve pressure by no
/// more than `tau`. A part whose current GPU can no longer hold it is
/// moved regardless of `tau`.
pub fn place_models(models: &[PlacementInput], capacities: &[u64], tau: f64) -> Result<PlacementPlan, GlobalSchedError> {
    let mut seen = std::collections::BTreeSet::new();
    for m in models {
        if !seen.insert(m.id.as_str()) {
            return Err(GlobalSchedError::Invalid(format!("duplicate model {}", m.id)));
        }
        if !(m.slo_s > 0.0) || !(m.rate >= 0.0) {
            return Err(GlobalSchedError::Invalid(format!("{}: rate must be >= 0 and SLO > 0", m.id)));
        }
        if m.tp_degree as usize > capacities.len() {
            return Err(GlobalSchedError::TooFewGpus { model: m.id.clone(), tp: m.tp_degree, gpus: capacities.len() });
        }
        if m.current.iter().any(|&g| g >= capacities.len()) {
            return Err(GlobalSchedError::Invalid(format!("{}: current GPU out of range", m.id)));
        }
    }
    let mut parts: Vec<PartSpec> = models.iter().flat_map(tp_decompose).collect();
    parts.sort_by(|a, b| {
        b.priority()
            .total_cmp(&a.priority())
            .then_with(|| a.model.cmp(&b.model))
            .then_with(|| a.part.cmp(&b.part))
    });

    let mut gpus: Vec<GpuView> = capacities.iter().enumerate().map(|(g, &c)| GpuView::empty(g, c)).collect();
    let mut assignment: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut migrations = Vec::new();
    let mut last: Vec<Option<(String, i128, u64)>> = vec![None; gpus.len()];

    for p in &parts {
        let taken = assignment.get(&p.model).cloned().unwrap_or_default();
        let eligible = |v: &GpuView| v.shared_kv - i128::from(p.weight_bytes) > 0 && !taken.contains(&v.gpu);
        let best = gpus
            .iter()
            .filter(|v| eligible(v))
            .min_by(|a, b| a.kvpr().total_cmp(&b.kvpr()).then(a.gpu.cmp(&b.gpu)))
            .map(|v| v.gpu)
            .ok_or_else(|| GlobalSchedError::Infeasible { model: p.model.clone() })?;
        let target = match p.current {
            Some(cur) if eligible(&gpus[cur]) => {
                if gpus[cur].kvpr() - gpus[best].kvpr() > tau {
                    best
                } else {
                    cur
                }
            }
            _ => best,
        };
        if let Some(cur) = p.current {
            if cur != target {
                migrations.push(Migration { model: p.model.clone(), part: p.part, from: cur, to: target });
            }
        }
        let v = &mut gpus[target];
        last[target] = Some((p.model.clone(), v.shared_kv, p.weight_bytes));
        v.w_req_rate += p.priority();
        v.shared_kv -= i128::from(p.weight_bytes);
        if !v.models.contains(&p.model) {
            v.models.push(p.model.clone());
        }
        assignment.entry(p.model.clone()).or_default().push(target);
    }

    let critical = gpus
        .iter()
        .filter(|v| v.w_req_rate > 0.0)
        .max_by(|a, b| a.kvpr().total_cmp(&b.kvpr()).then(b.gpu.cmp(&a.gpu)))
        .and_then(|v| last[v.gpu].clone().map(|(m, s, w)| CriticalGpu { gpu: v.gpu, last_model: m, shared_before: s, last_weight: w }));
    Ok(PlacementPlan { assignment, gpus, migrations, critical })
}

/// "Memory is constrained" test used to gate eviction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PressurePredicate {
    pub free_fraction: f64,
}

impl Default for PressurePredicate {
    fn default() -> Self {
        PressurePredicate { free_fraction: DEFAULT_PRESSURE_FREE_FRACTION }
    }
}

impl PressurePredicate {
    pub fn holds(&self, free_pages: u64, capacity_pages: u64) -> bool {
        (free_pages as f64) < self.free_fraction * capacity_pages as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpuMemory {
    pub gpu: usize,
    pub capacity_pages: u64,
    pub free_pages: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdleModel {
    pub model: String,
    pub gpus: Vec<usize>,
    pub idle_s: f64,
    pub slo_s: f64,
    /// Pages returned per GPU when the model is evicted.
    pub pages_per_gpu: u64,
}

/// Evict idle models from GPUs under pressure, largest SLO first, until
/// the pressure clears. Models idle for no more than `idle_threshold_s`
/// are never candidates.
pub fn eviction_tick(
    gpus: &[GpuMemory],
    idle: &[IdleModel],
    idle_threshold_s: f64,
    pressure: PressurePredicate,
) -> Vec<String> {
    let mut free: Vec<u64> = gpus.iter().map(|g| g.free_pages).collect();
    let cap: Vec<u64> = gpus.iter().map(|g| g.capacity_pages).collect();
    let mut candidates: Vec<&IdleModel> = idle.iter().filter(|m| m.idle_s > idle_threshold_s).collect();
    candidates.sort_by(|a, b| b.slo_s.total_cmp(&a.slo_s).then_with(|| a.model.cmp(&b.model)));
    let mut evicted = Vec::new();
    for m in candidates {
        let pressured = m.gpus.iter().any(|&g| pressure.holds(free[g], cap[g]));
        if !pressured {
            continue;
        }
        for &g in &m.gpus {
            free[g] += m.pages_per_gpu;
        }
        evicted.push(m.model.clone());
    }
    evicted
}

/// Pick `tp` distinct GPUs for an evicted model: lowest pressure first
/// (lowest index on ties) among GPUs whose free memory holds one shard.
/// `None` means the caller must retry later.
pub fn activate_on_arrival(gpus: &[GpuView], free_bytes: &[u64], shard_bytes: u64, tp: u32) -> Option<Vec<usize>> {
    let mut fit: Vec<&GpuView> = gpus.iter().filter(|v| free_bytes[v.gpu] >= shard_bytes).collect();
    fit.sort_by(|a, b| a.kvpr().total_cmp(&b.kvpr()).then(a.gpu.cmp(&b.gpu)));
    if fit.len() < tp as usize {
        return None;
    }
    let mut chosen: Vec<usize> = fit[..tp as usize].iter().map(|v| v.gpu).collect();
    chosen.sort_unstable();
    Some(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GB: u64 = 1_000_000_000;

    #[test]
    fn kvpr_examples() {
        assert_eq!(kvpr(0.0, 40 * GB as i128).unwrap(), 0.0);
        assert!((kvpr(2.0, 20 * GB as i128).unwrap() - 0.1).abs() < 1e-12);
        let a = kvpr(3.0, 20 * GB as i128).unwrap();
        let b = kvpr(3.0, 10 * GB as i128).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
        assert!(matches!(kvpr(1.0, 0), Err(GlobalSchedError::UndefinedPressure(0))));
    }

    #[test]
    fn single_model_takes_lowest_index() {
        let plan = place_models(&[PlacementInput::new("a", 1.0, 1.0, 10 * GB)], &[40 * GB, 40 * GB], 0.0).unwrap();
        assert_eq!(plan.gpus_of("a"), Some(&[0][..]));
    }

    fn four() -> Vec<PlacementInput> {
        [8.0, 4.0, 2.0, 1.0]
            .iter()
            .map(|&r| PlacementInput::new(format!("m{}", r as u32), r, 1.0, 10 * GB))
            .collect()
    }

    /// Hand execution: m8 -> g0 (tie), m4 -> g1 (0 < 8/30), m2 -> g1
    /// (4/30 < 8/30), m1 -> g0 (8/30 < 6/20).
    #[test]
    fn four_model_walkthrough() {
        let plan = place_models(&four(), &[40 * GB, 40 * GB], 0.0).unwrap();
        assert_eq!(plan.gpus_of("m8"), Some(&[0][..]));
        assert_eq!(plan.gpus_of("m1"), Some(&[0][..]));
        assert_eq!(plan.gpus_of("m4"), Some(&[1][..]));
        assert_eq!(plan.gpus_of("m2"), Some(&[1][..]));
        assert!((plan.gpus[0].kvpr() - 9.0 / 20.0).abs() < 1e-12);
        assert!((plan.gpus[1].kvpr() - 6.0 / 20.0).abs() < 1e-12);
        let c = plan.critical.as_ref().unwrap();
        assert_eq!((c.gpu, c.last_model.as_str(), c.shared_before), (0, "m1", 30 * GB as i128));
    }

    #[test]
    fn large_tau_keeps_current_gpu() {
        let mut models = four();
        models[3] = models[3].clone().on(&[1]);
        let plan = place_models(&models, &[40 * GB, 40 * GB], 100.0).unwrap();
        assert_eq!(plan.gpus_of("m1"), Some(&[1][..]));
        assert!(plan.migrations.is_empty());
        let moved = place_models(&models, &[40 * GB, 40 * GB], 0.0).unwrap();
        assert_eq!(moved.migrations, vec![Migration { model: "m1".into(), part: 0, from: 1, to: 0 }]);
    }

    #[test]
    fn oversized_current_gpu_forces_migration() {
        let models = vec![
            PlacementInput::new("big", 5.0, 1.0, 30 * GB).on(&[0]),
            PlacementInput::new("small", 1.0, 1.0, 15 * GB).on(&[0]),
        ];
        let plan = place_models(&models, &[40 * GB, 40 * GB], 1e9).unwrap();
        assert_eq!(plan.gpus_of("small"), Some(&[1][..]));
        assert_eq!(plan.migrations.len(), 1);
    }

    #[test]
    fn model_fitting_nowhere_is_infeasible() {
        let err = place_models(&[PlacementInput::new("x", 1.0, 1.0, 50 * GB)], &[40 * GB], 0.0).unwrap_err();
        assert_eq!(err, GlobalSchedError::Infeasible { model: "x".into() });
    }

    #[test]
    fn tp_decompose_splits_evenly() {
        let m = PlacementInput::new("t", 4.0, 2.0, 40 * GB).with_tp(4);
        let parts = tp_decompose(&m);
        assert_eq!(parts.len(), 4);
        assert!(parts.iter().all(|p| p.weight_bytes == 10 * GB && p.rate == 1.0 && p.priority() == 0.5));
        assert_eq!(tp_decompose(&PlacementInput::new("s", 1.0, 1.0, GB)).len(), 1);
    }

    #[test]
    fn tp_parts_spread_over_distinct_gpus() {
        let m = PlacementInput::new("t", 4.0, 1.0, 40 * GB).with_tp(4);
        let plan = place_models(&[m], &[80 * GB; 4], 0.0).unwrap();
        assert_eq!(plan.gpus_of("t"), Some(&[0, 1, 2, 3][..]));
        let m = PlacementInput::new("t", 4.0, 1.0, 40 * GB).with_tp(5);
        assert!(matches!(place_models(&[m], &[80 * GB; 4], 0.0), Err(GlobalSchedError::TooFewGpus { .. })));
    }

    #[test]
    fn tp_parts_avoid_loaded_gpu() {
        let models = vec![
            PlacementInput::new("hot", 10.0, 1.0, 10 * GB),
            PlacementInput::new("t", 4.0, 1.0, 20 * GB).with_tp(2),
        ];
        let caps = [80 * GB, 80 * GB, 80 * GB];
        let plan = place_models(&models, &caps, 0.0).unwrap();
        assert_eq!(plan.gpus_of("hot"), Some(&[0][..]));
        assert_eq!(plan.gpus_of("t"), Some(&[1, 2][..]));

        let models = vec![PlacementInput::new("t", 4.0, 1.0, 20 * GB).with_tp(2), PlacementInput::new("x", 1.0, 1.0, 70 * GB)];
        let plan = place_models(&models, &[80 * GB, 80 * GB, 80 * GB], 0.0).unwrap();
        let t = plan.gpus_of("t").unwrap();
        assert_ne!(t[0], t[1]);
    }

    #[test]
    fn argmin_with_sibling_is_skipped() {
        // GPU0 tiny pressure even after part 0; GPU1 and GPU2 busier.
        let models = vec![
            PlacementInput::new("a", 6.0, 1.0, 10 * GB),
            PlacementInput::new("b", 5.0, 1.0, 10 * GB),
            PlacementInput::new("t", 0.2, 1.0, 2 * GB).with_tp(2),
        ];
        let caps = [200 * GB, 40 * GB, 40 * GB];
        let plan = place_models(&models, &caps, 0.0).unwrap();
        assert_eq!(plan.gpus_of("a"), Some(&[0][..]));
        assert_eq!(plan.gpus_of("b"), Some(&[1][..]));
        // after part 0 on GPU2 (lowest: 0), GPU2 is 0.1/39 and GPU0 6/190:
        // GPU2 is the argmin but hosts the sibling, so the second-lowest, GPU0.
        assert_eq!(plan.gpus_of("t"), Some(&[2, 0][..]));
    }

    #[test]
    fn eviction_examples() {
        let idle = vec![
            IdleModel { model: "loose".into(), gpus: vec![0], idle_s: 30.0, slo_s: 10.0, pages_per_gpu: 100 },
            IdleModel { model: "strict".into(), gpus: vec![0], idle_s: 30.0, slo_s: 2.0, pages_per_gpu: 100 },
            IdleModel { model: "recent".into(), gpus: vec![0], idle_s: 9.0, slo_s: 50.0, pages_per_gpu: 100 },
        ];
        let relaxed = [GpuMemory { gpu: 0, capacity_pages: 1000, free_pages: 500 }];
        assert!(eviction_tick(&relaxed, &idle, 10.0, PressurePredicate::default()).is_empty());
        let tight = [GpuMemory { gpu: 0, capacity_pages: 1000, free_pages: 10 }];
        assert_eq!(eviction_tick(&tight, &idle, 10.0, PressurePredicate::default()), vec!["loose"]);
        let tighter = [GpuMemory { gpu: 0, capacity_pages: 10_000, free_pages: 10 }];
        assert_eq!(eviction_tick(&tighter, &idle, 10.0, PressurePredicate::default()), vec!["loose", "strict"]);
    }

    #[test]
    fn activation_picks_lowest_pressure_gpu_with_room() {
        let mut a = GpuView::empty(0, 40 * GB);
        a.w_req_rate = 0.3 * 40.0;
        let mut b = GpuView::empty(1, 40 * GB);
        b.w_req_rate = 0.1 * 40.0;
        let gpus = [a, b];
        assert_eq!(activate_on_arrival(&gpus, &[20 * GB, 20 * GB], 16 * GB, 1), Some(vec![1]));
        assert_eq!(activate_on_arrival(&gpus, &[20 * GB, 10 * GB], 16 * GB, 1), Some(vec![0]));
        assert_eq!(activate_on_arrival(&gpus[..1], &[GB], 16 * GB, 1), None);
    }

    #[test]
    fn placement_is_deterministic() {
        let a = place_models(&four(), &[40 * GB, 40 * GB, 40 * GB], 0.05).unwrap();
        let b = place_models(&four(), &[40 * GB, 40 * GB, 40 * GB], 0.05).unwrap();
        assert_eq!(a, b);
    }
}
