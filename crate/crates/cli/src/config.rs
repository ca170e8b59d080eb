//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! gpu_count = 2
//! gpu_capacity_bytes = 80_000_000_000
//!
//! [[models]]
//! id = "chat"
//! class = "8b"          # preset; any ModelSpec field below overrides it
//! ttft_slo_s = 1.0
//! tpot_slo_s = 0.1
//!
//! [policy]
//! kind = "prism"
//!
//! [sched]
//! tau = 0.05
//!
//! [trace]
//! path = "trace.jsonl"  # relative to this file
//! ```
//!
//! Instead of `trace.path`, `[[trace.synth]]` entries describe per-model
//! Poisson rate profiles (see [`ModelProfile`]); they are sampled with the
//! root seed.

use gpushare::config::{SchedParams, SimConfig};
use gpushare::enginemodel::{ActivationParams, ModelSpec};
use gpushare::pagealloc::DEFAULT_PAGE_BYTES;
use gpushare::policies::PolicyConfig;
use gpushare::workload::{parse_trace, synth_trace, ModelProfile, SynthSpec, TraceEvent};
use serde::Deserialize;
use std::path::{Path, PathBuf};

use crate::CliError;

fn default_page_bytes() -> u64 {
    DEFAULT_PAGE_BYTES
}

fn default_slo_scale() -> f64 {
    1.0
}

/// One model entry: a size-class preset, explicit fields, or both.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub id: String,
    /// One of `1b`, `3b`, `8b`, `14b`, `70b`.
    pub class: Option<String>,
    pub weight_bytes: Option<u64>,
    pub token_kv_bytes: Option<u64>,
    pub chunk_size: Option<u32>,
    pub ttft_slo_s: Option<f64>,
    pub tpot_slo_s: Option<f64>,
    pub tp_degree: Option<u32>,
    pub iter_base_s: Option<f64>,
    pub iter_per_token_s: Option<f64>,
}

impl ModelEntry {
    pub fn resolve(&self) -> Result<ModelSpec, CliError> {
        let id = self.id.as_str();
        let mut spec = match self.class.as_deref() {
            Some("1b") => ModelSpec::class_1b(id),
            Some("3b") => ModelSpec::class_3b(id),
            Some("8b") => ModelSpec::class_8b(id),
            Some("14b") => ModelSpec::class_14b(id),
            Some("70b") => ModelSpec::class_70b(id),
            Some(other) => return Err(CliError::Config(format!("models.{id}.class: unknown preset {other:?}"))),
            None => {
                let need = |v: Option<u64>, field: &str| {
                    v.ok_or_else(|| CliError::Config(format!("models.{id}.{field}: required without a class preset")))
                };
                let mut s = ModelSpec::class_8b(id);
                s.weight_bytes = need(self.weight_bytes, "weight_bytes")?;
                s.token_kv_bytes = need(self.token_kv_bytes, "token_kv_bytes")?;
                if self.ttft_slo_s.is_none() || self.tpot_slo_s.is_none() {
                    return Err(CliError::Config(format!("models.{id}: ttft_slo_s and tpot_slo_s are required without a class preset")));
                }
                s
            }
        };
        if let Some(v) = self.weight_bytes {
            spec.weight_bytes = v;
        }
        if let Some(v) = self.token_kv_bytes {
            spec.token_kv_bytes = v;
        }
        if let Some(v) = self.chunk_size {
            spec.chunk_size = v;
        }
        if let Some(v) = self.ttft_slo_s {
            spec.ttft_slo_s = v;
        }
        if let Some(v) = self.tpot_slo_s {
            spec.tpot_slo_s = v;
        }
        if let Some(v) = self.tp_degree {
            spec.tp_degree = v;
        }
        if let Some(v) = self.iter_base_s {
            spec.iter_base_s = v;
        }
        if let Some(v) = self.iter_per_token_s {
            spec.iter_per_token_s = v;
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSource {
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synth: Vec<ModelProfile>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub models: Vec<ModelEntry>,
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
    #[serde(default)]
    pub trace: TraceSource,
    /// Multiplier applied to every SLO when scoring.
    #[serde(default = "default_slo_scale")]
    pub slo_scale: f64,
    /// Directory relative trace paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// The validated simulator configuration.
    pub fn sim_config(&self) -> Result<SimConfig, CliError> {
        if !(self.slo_scale.is_finite() && self.slo_scale > 0.0) {
            return Err(CliError::Config(format!("slo_scale: {} must be positive", self.slo_scale)));
        }
        let models = self.models.iter().map(ModelEntry::resolve).collect::<Result<Vec<_>, _>>()?;
        let mut cfg = SimConfig::new(models, self.gpu_count, self.gpu_capacity_bytes);
        cfg.page_bytes = self.page_bytes;
        cfg.policy = self.policy.clone();
        cfg.sched = self.sched.clone();
        cfg.activation = self.activation.clone();
        cfg.seed = self.seed;
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Load the trace named by `override_path`, else by the config.
    pub fn load_trace(&self, override_path: Option<&Path>) -> Result<Vec<TraceEvent>, CliError> {
        if let Some(p) = override_path {
            return parse_trace(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())));
        }
        match (&self.trace.path, self.trace.synth.is_empty()) {
            (Some(_), false) => Err(CliError::Config("trace: give either path or synth, not both".into())),
            (Some(p), true) => {
                let full = self.base_dir.join(p);
                parse_trace(&full).map_err(|e| CliError::Config(format!("{}: {e}", full.display())))
            }
            (None, false) => synth_trace(&SynthSpec { models: self.trace.synth.clone(), seed: self.seed })
                .map_err(|e| CliError::Config(format!("trace.synth: {e}"))),
            (None, true) => Err(CliError::Config("no trace: pass --trace or set trace.path / trace.synth".into())),
        }
    }
}

/// Every model the trace references must be configured.
pub fn check_trace_models(cfg: &SimConfig, trace: &[TraceEvent]) -> Result<(), CliError> {
    for ev in trace {
        if cfg.model(&ev.model_id).is_none() {
            return Err(CliError::Config(format!("trace references unknown model {:?}", ev.model_id)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
gpu_count = 1
gpu_capacity_bytes = 80_000_000_000

[[models]]
id = "a"
class = "8b"
"#;

    #[test]
    fn presets_and_overrides() {
        let cfg = RunConfig::parse(&format!("{MINIMAL}ttft_slo_s = 2.5\n")).unwrap();
        let spec = cfg.sim_config().unwrap().models.remove(0);
        assert_eq!(spec.weight_bytes, ModelSpec::class_8b("a").weight_bytes);
        assert_eq!(spec.ttft_slo_s, 2.5);
    }

    #[test]
    fn explicit_model_needs_sizes() {
        let text = "gpu_count = 1\ngpu_capacity_bytes = 80_000_000_000\n[[models]]\nid = \"a\"\nweight_bytes = 1\n";
        let err = RunConfig::parse(text).unwrap().sim_config().unwrap_err();
        assert!(err.to_string().contains("token_kv_bytes"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::parse(&format!("{MINIMAL}colour = 3\n")).is_err());
        assert!(RunConfig::parse(&format!("bogus = 1\n{MINIMAL}")).is_err());
    }

    #[test]
    fn defaults_match_library_constants() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.sched, SchedParams::default());
        assert_eq!(cfg.activation, ActivationParams::default());
        assert_eq!(cfg.policy, PolicyConfig::default());
        assert_eq!(cfg.page_bytes, DEFAULT_PAGE_BYTES);
        assert_eq!(cfg.slo_scale, 1.0);
        let sim = cfg.sim_config().unwrap();
        assert_eq!(sim, {
            let mut s = SimConfig::new(vec![ModelSpec::class_8b("a")], 1, 80_000_000_000);
            s.seed = 0;
            s
        });
    }
}
