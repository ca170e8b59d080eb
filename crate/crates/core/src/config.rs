//! Simulation configuration shared by the library and the command line.

use crate::enginemodel::{ActivationParams, ModelSpec, DEFAULT_ENGINE_INIT_S, DEFAULT_REALIGN_S, DEFAULT_RESERVE_FRACTION};
use crate::global_sched::{DEFAULT_IDLE_THRESHOLD_S, DEFAULT_PRESSURE_FREE_FRACTION, DEFAULT_TAU};
use crate::pagealloc::{DEFAULT_BUFFER_TARGET_PAGES, DEFAULT_MAP_LATENCY_S, DEFAULT_PAGE_BYTES};
use crate::policies::PolicyConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Scheduler and runtime knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedParams {
    /// Minimum KV-pressure improvement (per GB) before a model migrates.
    pub tau: f64,
    pub idle_threshold_s: f64,
    pub tick_s: f64,
    /// Time constant of the request-rate moving average.
    pub rate_window_s: f64,
    /// Length of the trace prefix used for the initial placement.
    pub profile_window_s: f64,
    /// Eviction runs only while free pages are below this capacity share.
    pub pressure_free_fraction: f64,
    pub buffer_target_pages: u64,
    pub map_latency_s: f64,
    /// Share of an engine's mapped KV held back when admitting prefills.
    pub reserve_fraction: f64,
    pub engine_init_s: f64,
    pub realign_s: f64,
    /// The run stops this long after the last arrival; requests still
    /// outstanding then count as SLO misses.
    pub drain_horizon_s: f64,
}

impl Default for SchedParams {
    fn default() -> Self {
        SchedParams {
            tau: DEFAULT_TAU,
            idle_threshold_s: DEFAULT_IDLE_THRESHOLD_S,
            tick_s: 10.0,
            rate_window_s: 60.0,
            profile_window_s: 60.0,
            pressure_free_fraction: DEFAULT_PRESSURE_FREE_FRACTION,
            buffer_target_pages: DEFAULT_BUFFER_TARGET_PAGES,
            map_latency_s: DEFAULT_MAP_LATENCY_S,
            reserve_fraction: DEFAULT_RESERVE_FRACTION,
            engine_init_s: DEFAULT_ENGINE_INIT_S,
            realign_s: DEFAULT_REALIGN_S,
            drain_horizon_s: 3600.0,
        }
    }
}

fn default_page_bytes() -> u64 {
    DEFAULT_PAGE_BYTES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub models: Vec<ModelSpec>,
    pub gpu_count: usize,
    pub gpu_capacity_bytes: u64,
    #[serde(default = "default_page_bytes")]
    pub page_bytes: u64,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub sched: SchedParams,
    #[serde(default)]
    pub activation: ActivationParams,
    #[serde(default)]
    pub seed: u64,
}

impl SimConfig {
    pub fn new(models: Vec<ModelSpec>, gpu_count: usize, gpu_capacity_bytes: u64) -> Self {
        SimConfig {
            models,
            gpu_count,
            gpu_capacity_bytes,
            page_bytes: DEFAULT_PAGE_BYTES,
            policy: PolicyConfig::default(),
            sched: SchedParams::default(),
            activation: ActivationParams::default(),
            seed: 0,
        }
    }

    pub fn model(&self, id: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |s: String| Err(ConfigError::Invalid(s));
        if self.models.is_empty() {
            return bad("no models configured".into());
        }
        if self.gpu_count == 0 {
            return bad("gpu_count must be positive".into());
        }
        if self.page_bytes == 0 || self.gpu_capacity_bytes < self.page_bytes {
            return bad("GPU capacity must hold at least one page".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for m in &self.models {
            m.validate().map_err(ConfigError::Invalid)?;
            if !ids.insert(m.id.as_str()) {
                return bad(format!("duplicate model id {}", m.id));
            }
            if m.token_kv_bytes_per_gpu() > self.page_bytes {
                return bad(format!("{}: one token's KV exceeds the page size", m.id));
            }
            if m.tp_degree as usize > self.gpu_count {
                return bad(format!("{}: tp_degree {} exceeds gpu_count", m.id, m.tp_degree));
            }
            if m.weight_bytes_per_gpu() >= self.gpu_capacity_bytes {
                return bad(format!("{}: weights do not fit on a GPU", m.id));
            }
        }
        let s = &self.sched;
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(s.tau >= 0.0) || !pos(s.tick_s) || !pos(s.rate_window_s) || !pos(s.profile_window_s) {
            return bad("tau must be >= 0; tick, rate and profile windows must be positive".into());
        }
        if !(s.idle_threshold_s >= 0.0) || !(0.0..=1.0).contains(&s.pressure_free_fraction) {
            return bad("idle threshold must be >= 0 and pressure fraction in [0, 1]".into());
        }
        if !(s.map_latency_s >= 0.0) || !(0.0..1.0).contains(&s.reserve_fraction) {
            return bad("map latency must be >= 0 and reserve fraction in [0, 1)".into());
        }
        if !(s.engine_init_s >= 0.0) || !(s.realign_s >= 0.0) || !pos(s.drain_horizon_s) {
            return bad("engine init and realign latencies must be >= 0 and the drain horizon positive".into());
        }
        self.policy.validate(self).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let s = SchedParams::default();
        assert_eq!(s.tau, 0.05);
        assert_eq!(s.idle_threshold_s, 10.0);
        assert_eq!(s.tick_s, 10.0);
        assert_eq!(s.rate_window_s, 60.0);
        assert_eq!(s.pressure_free_fraction, 0.10);
        assert_eq!(s.buffer_target_pages, 8);
    }

    #[test]
    fn rejects_models_that_cannot_fit() {
        let cfg = SimConfig::new(vec![ModelSpec::class_70b("big")], 2, 80_000_000_000);
        assert!(cfg.validate().is_err());
        let cfg = SimConfig::new(vec![ModelSpec::class_8b("a")], 1, 10_000_000_000);
        assert!(cfg.validate().is_err());
        let cfg = SimConfig::new(vec![ModelSpec::class_8b("a")], 1, 80_000_000_000);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn typical_slo_ranges_are_valid() {
        let m = ModelSpec::class_8b("a").with_slos(0.04, 0.0052);
        let n = ModelSpec::class_8b("b").with_slos(0.13, 0.0509);
        assert!(SimConfig::new(vec![m, n], 1, 80_000_000_000).validate().is_ok());
    }
}
