//! Sharing policies compared under the same simulator: placement at start,
//! memory rules and which runtime mechanisms (migration, eviction,
//! activation, deadline-aware admission, swapping) each one uses.

use crate::config::SimConfig;
use crate::global_sched::{place_models, GlobalSchedError, PlacementInput};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("unknown policy {0:?}")]
    Unknown(String),
    #[error("partition fractions on GPU {gpu} sum to {sum}")]
    FractionsExceedOne { gpu: usize, sum: f64 },
    #[error("model {model} weights exceed its partition on GPU {gpu}")]
    WeightsExceedPartition { model: String, gpu: usize },
    #[error("colocation map: {0}")]
    Colocation(String),
    #[error("dedicated policy needs {need} GPUs, cluster has {have}")]
    NotEnoughGpus { need: usize, have: usize },
    #[error(transparent)]
    Placement(#[from] GlobalSchedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Prism,
    StaticPartition,
    MuxFlexible,
    QlmTimeshare,
    Dedicated,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Prism,
        PolicyKind::StaticPartition,
        PolicyKind::MuxFlexible,
        PolicyKind::QlmTimeshare,
        PolicyKind::Dedicated,
    ];
    pub const BASELINES: [PolicyKind; 3] = [PolicyKind::StaticPartition, PolicyKind::MuxFlexible, PolicyKind::QlmTimeshare];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Prism => "prism",
            PolicyKind::StaticPartition => "static_partition",
            PolicyKind::MuxFlexible => "mux_flexible",
            PolicyKind::QlmTimeshare => "qlm_timeshare",
            PolicyKind::Dedicated => "dedicated",
        }
    }
    /// Requests wait in a per-GPU queue and are admitted by deadline.
    pub fn deadline_admission(self) -> bool {
        matches!(self, PolicyKind::Prism | PolicyKind::Dedicated)
    }
    /// Placement is revisited at every tick.
    pub fn migrates(self) -> bool {
        self == PolicyKind::Prism
    }
    pub fn evicts(self) -> bool {
        self == PolicyKind::Prism
    }
    pub fn activates_on_arrival(self) -> bool {
        self == PolicyKind::Prism
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = PolicyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PolicyError::Unknown(s.to_string()))
    }
}

fn default_true() -> bool {
    true
}
fn default_group_window() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default)]
    pub kind: PolicyKind,
    /// With `false`, deadline-aware policies fall back to per-model FIFO
    /// dispatch straight into the engines.
    #[serde(default = "default_true")]
    pub local_scheduler: bool,
    /// Static partition share per model (default: weights plus an equal
    /// split of the GPU's remaining memory).
    #[serde(default)]
    pub fractions: BTreeMap<String, f64>,
    /// Fixed model -> GPUs map for colocation policies (default: computed
    /// from the profile window).
    #[serde(default)]
    pub colocation: Option<BTreeMap<String, Vec<usize>>>,
    /// Requests of one model arriving within this window form a group.
    #[serde(default = "default_group_window")]
    pub qlm_group_window_s: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: PolicyKind::Prism,
            local_scheduler: true,
            fractions: BTreeMap::new(),
            colocation: None,
            qlm_group_window_s: default_group_window(),
        }
    }
}

impl PolicyConfig {
    pub fn of(kind: PolicyKind) -> Self {
        PolicyConfig { kind, ..Default::default() }
    }

    pub fn uses_deadline_admission(&self) -> bool {
        self.kind.deadline_admission() && self.local_scheduler
    }

    pub fn validate(&self, cfg: &SimConfig) -> Result<(), PolicyError> {
        if !(self.qlm_group_window_s >= 0.0) {
            return Err(PolicyError::Colocation("group window must be >= 0".into()));
        }
        for (m, f) in &self.fractions {
            if cfg.model(m).is_none() || !(*f > 0.0 && *f <= 1.0) {
                return Err(PolicyError::Colocation(format!("bad fraction {f} for model {m}")));
            }
        }
        if let Some(map) = &self.colocation {
            check_colocation(cfg, map)?;
            if self.kind == PolicyKind::StaticPartition {
                partition_caps(cfg, map)?;
            }
        }
        if self.kind == PolicyKind::Dedicated {
            let need: usize = cfg.models.iter().map(|m| m.tp_degree as usize).sum();
            if need > cfg.gpu_count {
                return Err(PolicyError::NotEnoughGpus { need, have: cfg.gpu_count });
            }
        }
        Ok(())
    }
}

fn check_colocation(cfg: &SimConfig, map: &BTreeMap<String, Vec<usize>>) -> Result<(), PolicyError> {
    let mut used = vec![0u64; cfg.gpu_count];
    for m in &cfg.models {
        let gpus = map
            .get(&m.id)
            .ok_or_else(|| PolicyError::Colocation(format!("model {} is not mapped", m.id)))?;
        let mut distinct = gpus.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if gpus.len() != m.tp_degree as usize || distinct.len() != gpus.len() || gpus.iter().any(|&g| g >= cfg.gpu_count) {
            return Err(PolicyError::Colocation(format!("model {} needs {} distinct valid GPUs", m.id, m.tp_degree)));
        }
        for &g in gpus {
            used[g] += m.weight_bytes_per_gpu().div_ceil(cfg.page_bytes) * cfg.page_bytes;
        }
    }
    if let Some(g) = used.iter().position(|&u| u >= cfg.gpu_capacity_bytes) {
        return Err(PolicyError::Colocation(format!("weights exceed GPU {g}")));
    }
    Ok(())
}

/// Where every model starts, and which models start unloaded.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialPlacement {
    pub resident: BTreeMap<String, Vec<usize>>,
    pub evicted: Vec<String>,
}

fn placement_inputs(cfg: &SimConfig, rates: &BTreeMap<String, f64>) -> Vec<PlacementInput> {
    cfg.models
        .iter()
        .map(|m| {
            PlacementInput::new(&m.id, rates.get(&m.id).copied().unwrap_or(0.0), m.ttft_slo_s, m.weight_bytes)
                .with_tp(m.tp_degree)
        })
        .collect()
}

/// Compute the start-of-run placement from profile-window `rates`.
pub fn initial_placement(cfg: &SimConfig, rates: &BTreeMap<String, f64>) -> Result<InitialPlacement, PolicyError> {
    let caps = vec![cfg.gpu_capacity_bytes; cfg.gpu_count];
    let mut inputs = placement_inputs(cfg, rates);
    match cfg.policy.kind {
        PolicyKind::Prism => {
            // Models without traffic in the profile window start evicted,
            // then the lowest-priority ones are dropped until the rest fit.
            // Evicted models load on demand.
            inputs.sort_by(|a, b| b.priority().total_cmp(&a.priority()).then_with(|| a.id.cmp(&b.id)));
            let mut evicted: Vec<String> = Vec::new();
            while inputs.len() > 1 && inputs.last().is_some_and(|m| m.rate == 0.0) {
                evicted.push(inputs.pop().expect("non-empty").id);
            }
            loop {
                match place_models(&inputs, &caps, cfg.sched.tau) {
                    Ok(plan) => {
                        evicted.sort();
                        return Ok(InitialPlacement { resident: plan.assignment, evicted });
                    }
                    Err(GlobalSchedError::Infeasible { .. }) if inputs.len() > 1 => {
                        evicted.push(inputs.pop().expect("non-empty").id);
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        PolicyKind::StaticPartition | PolicyKind::MuxFlexible => {
            let resident = match &cfg.policy.colocation {
                Some(map) => map.clone(),
                None => place_models(&inputs, &caps, cfg.sched.tau)?.assignment,
            };
            Ok(InitialPlacement { resident, evicted: Vec::new() })
        }
        PolicyKind::Dedicated => {
            let mut next = 0;
            let mut resident = BTreeMap::new();
            for m in &cfg.models {
                let tp = m.tp_degree as usize;
                resident.insert(m.id.clone(), (next..next + tp).collect());
                next += tp;
            }
            if next > cfg.gpu_count {
                return Err(PolicyError::NotEnoughGpus { need: next, have: cfg.gpu_count });
            }
            Ok(InitialPlacement { resident, evicted: Vec::new() })
        }
        PolicyKind::QlmTimeshare => {
            // One model per GPU, busiest first.
            inputs.sort_by(|a, b| b.priority().total_cmp(&a.priority()).then_with(|| a.id.cmp(&b.id)));
            let mut free: Vec<usize> = (0..cfg.gpu_count).collect();
            let mut resident = BTreeMap::new();
            let mut evicted = Vec::new();
            for m in inputs {
                let tp = m.tp_degree as usize;
                if free.len() >= tp {
                    resident.insert(m.id.clone(), free.drain(..tp).collect());
                } else {
                    evicted.push(m.id);
                }
            }
            evicted.sort();
            Ok(InitialPlacement { resident, evicted })
        }
    }
}

/// Per (model, GPU) KV page caps for static partitioning. A model with a
/// configured fraction gets that share of the GPU minus its weights; the
/// others split whatever memory is left after all weights evenly.
pub fn partition_caps(cfg: &SimConfig, resident: &BTreeMap<String, Vec<usize>>) -> Result<BTreeMap<(String, usize), u64>, PolicyError> {
    let cap_pages = cfg.gpu_capacity_bytes / cfg.page_bytes;
    let mut on_gpu: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (m, gpus) in resident {
        for &g in gpus {
            on_gpu.entry(g).or_default().push(m);
        }
    }
    let mut caps = BTreeMap::new();
    for (g, models) in on_gpu {
        let sum: f64 = models.iter().filter_map(|m| cfg.policy.fractions.get(*m)).sum();
        if sum > 1.0 + 1e-9 {
            return Err(PolicyError::FractionsExceedOne { gpu: g, sum });
        }
        let mut left = cap_pages as i64;
        let mut rest = Vec::new();
        for &m in &models {
            let spec = cfg.model(m).ok_or_else(|| PolicyError::Colocation(format!("unknown model {m}")))?;
            let weights = spec.weight_bytes_per_gpu().div_ceil(cfg.page_bytes);
            match cfg.policy.fractions.get(m) {
                Some(f) => {
                    let part = (f * cap_pages as f64).floor() as u64;
                    if weights >= part {
                        return Err(PolicyError::WeightsExceedPartition { model: m.to_string(), gpu: g });
                    }
                    left -= part as i64;
                    caps.insert((m.to_string(), g), part - weights);
                }
                None => {
                    left -= weights as i64;
                    rest.push(m);
                }
            }
        }
        if let Some(first) = rest.first() {
            let each = left / rest.len() as i64;
            if each <= 0 {
                return Err(PolicyError::WeightsExceedPartition { model: first.to_string(), gpu: g });
            }
            for m in rest {
                caps.insert((m.to_string(), g), each as u64);
            }
        }
    }
    Ok(caps)
}

/// Request groups for time-shared serving: consecutive requests of one
/// model arriving within the window of the group's first request.
#[derive(Debug, Clone, Default)]
pub struct GroupQueue {
    window_s: f64,
    groups: VecDeque<RequestGroup>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestGroup {
    pub model: String,
    pub opened: f64,
    pub requests: Vec<u64>,
}

impl GroupQueue {
    pub fn new(window_s: f64) -> Self {
        GroupQueue { window_s, groups: VecDeque::new() }
    }

    pub fn push(&mut self, model: &str, t: f64, req: u64) {
        if let Some(g) = self.groups.iter_mut().rev().find(|g| g.model == model) {
            if t - g.opened <= self.window_s {
                g.requests.push(req);
                return;
            }
        }
        self.groups.push_back(RequestGroup { model: model.to_string(), opened: t, requests: vec![req] });
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
    pub fn len(&self) -> usize {
        self.groups.len()
    }
    pub fn iter(&self) -> impl Iterator<Item = &RequestGroup> {
        self.groups.iter()
    }
    pub fn remove(&mut self, idx: usize) -> Option<RequestGroup> {
        self.groups.remove(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enginemodel::ModelSpec;

    const C: u64 = 80_000_000_000;

    fn cfg(kind: PolicyKind, n: usize, gpus: usize) -> SimConfig {
        let models = (0..n).map(|i| ModelSpec::class_8b(&format!("m{i}"))).collect();
        let mut c = SimConfig::new(models, gpus, C);
        c.policy = PolicyConfig::of(kind);
        c
    }

    #[test]
    fn names_round_trip() {
        for k in PolicyKind::ALL {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
        }
        assert!("nope".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn fractions_over_one_are_rejected() {
        let mut c = cfg(PolicyKind::StaticPartition, 2, 1);
        c.policy.fractions = [("m0".to_string(), 0.6), ("m1".to_string(), 0.5)].into();
        let map: BTreeMap<String, Vec<usize>> = [("m0".to_string(), vec![0]), ("m1".to_string(), vec![0])].into();
        assert!(matches!(partition_caps(&c, &map), Err(PolicyError::FractionsExceedOne { .. })));
    }

    #[test]
    fn full_fraction_is_the_whole_gpu() {
        let c = cfg(PolicyKind::StaticPartition, 1, 1);
        let map: BTreeMap<String, Vec<usize>> = [("m0".to_string(), vec![0])].into();
        let caps = partition_caps(&c, &map).unwrap();
        let pages = C / c.page_bytes;
        let weights = c.models[0].weight_bytes.div_ceil(c.page_bytes);
        assert_eq!(caps[&("m0".to_string(), 0)], pages - weights);
    }

    #[test]
    fn weights_larger_than_share_are_rejected() {
        let mut c = cfg(PolicyKind::StaticPartition, 5, 1);
        c.policy.fractions = (0..5).map(|i| (format!("m{i}"), 0.2)).collect();
        let map: BTreeMap<String, Vec<usize>> = (0..5).map(|i| (format!("m{i}"), vec![0])).collect();
        assert!(matches!(partition_caps(&c, &map), Err(PolicyError::WeightsExceedPartition { .. })));
    }

    #[test]
    fn prism_drops_lowest_priority_models_when_overfull() {
        let c = cfg(PolicyKind::Prism, 6, 1);
        let rates: BTreeMap<String, f64> = (0..6).map(|i| (format!("m{i}"), 6.0 - i as f64)).collect();
        let p = initial_placement(&c, &rates).unwrap();
        assert_eq!(p.resident.len(), 4);
        assert_eq!(p.evicted, vec!["m4".to_string(), "m5".to_string()]);
    }

    #[test]
    fn dedicated_needs_a_gpu_per_model() {
        let c = cfg(PolicyKind::Dedicated, 3, 2);
        assert!(c.validate().is_err());
        let c = cfg(PolicyKind::Dedicated, 2, 2);
        let p = initial_placement(&c, &BTreeMap::new()).unwrap();
        assert_eq!(p.resident["m1"], vec![1]);
    }

    #[test]
    fn qlm_loads_one_model_per_gpu() {
        let c = cfg(PolicyKind::QlmTimeshare, 3, 2);
        let rates: BTreeMap<String, f64> = [("m2".to_string(), 5.0)].into();
        let p = initial_placement(&c, &rates).unwrap();
        assert_eq!(p.resident["m2"], vec![0]);
        assert_eq!(p.resident["m0"], vec![1]);
        assert_eq!(p.evicted, vec!["m1".to_string()]);
    }

    #[test]
    fn groups_split_by_model_and_window() {
        let mut q = GroupQueue::new(1.0);
        q.push("a", 0.0, 1);
        q.push("b", 0.2, 2);
        q.push("a", 0.9, 3);
        q.push("a", 1.5, 4);
        let g: Vec<_> = q.iter().map(|g| (g.model.clone(), g.requests.clone())).collect();
        assert_eq!(
            g,
            vec![("a".into(), vec![1, 3]), ("b".into(), vec![2]), ("a".into(), vec![4])]
        );
    }
}
