//! Parameter sweeps over policies. Independent runs execute on the rayon
//! pool when the `parallel` feature is on, sequentially otherwise; results
//! are identical either way.

use crate::config::SimConfig;
use crate::policies::PolicyKind;
use crate::sim::{run_policy, SimError, SimOutput};
use crate::workload::{rescale_trace, TraceEvent};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Multiply the request rate by resampling the trace.
    RateScale,
    /// Multiply every SLO when scoring; the runs themselves are shared.
    SloScale,
    GpuCount,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::RateScale => "rate_scale",
            Axis::SloScale => "slo_scale",
            Axis::GpuCount => "gpu_count",
        }
    }
}

impl FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rate_scale" => Ok(Axis::RateScale),
            "slo_scale" => Ok(Axis::SloScale),
            "gpu_count" => Ok(Axis::GpuCount),
            _ => Err(format!("unknown axis {s} (expected rate_scale, slo_scale or gpu_count)")),
        }
    }
}

/// One row of a sweep table. `model` is `"all"` for the cluster aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: String,
    pub axis_value: f64,
    pub model: String,
    pub ttft_attainment: f64,
    pub tpot_attainment: f64,
    pub throughput: f64,
    pub errors: String,
}

/// Size the worker pool used by [`par_map`]. Only the first call takes
/// effect; without the `parallel` feature this is a no-op.
pub fn set_jobs(jobs: usize) -> Result<(), String> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().map_err(|e| e.to_string())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        Ok(())
    }
}

pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

fn rows_for(policy: PolicyKind, value: f64, result: &Result<SimOutput, SimError>, slo_scale: f64) -> Vec<SweepRow> {
    match result {
        Ok(out) => {
            let rec = &out.record;
            let all = rec.overall_attainment(slo_scale);
            let mut rows = vec![SweepRow {
                policy: policy.name().into(),
                axis_value: value,
                model: "all".into(),
                ttft_attainment: all.ttft,
                tpot_attainment: all.tpot,
                throughput: rec.throughput(None),
                errors: String::new(),
            }];
            for (model, a) in rec.attainment(slo_scale) {
                rows.push(SweepRow {
                    policy: policy.name().into(),
                    axis_value: value,
                    throughput: rec.throughput(Some(&model)),
                    model,
                    ttft_attainment: a.ttft,
                    tpot_attainment: a.tpot,
                    errors: String::new(),
                });
            }
            rows
        }
        Err(e) => vec![SweepRow {
            policy: policy.name().into(),
            axis_value: value,
            model: "all".into(),
            ttft_attainment: f64::NAN,
            tpot_attainment: f64::NAN,
            throughput: f64::NAN,
            errors: e.to_string(),
        }],
    }
}

/// Run every `(policy, value)` pair. Failed runs produce a row with the
/// error message instead of aborting the sweep.
pub fn sweep(cfg: &SimConfig, trace: &[TraceEvent], policies: &[PolicyKind], axis: Axis, values: &[f64]) -> Vec<SweepRow> {
    let jobs: Vec<(PolicyKind, f64)> = match axis {
        Axis::SloScale => policies.iter().map(|&p| (p, 1.0)).collect(),
        _ => policies.iter().flat_map(|&p| values.iter().map(move |&v| (p, v))).collect(),
    };
    let results = par_map(&jobs, |&(policy, v)| run_point(cfg, trace, policy, axis, v));
    let mut rows = Vec::new();
    match axis {
        Axis::SloScale => {
            for ((policy, _), res) in jobs.iter().zip(&results) {
                for &v in values {
                    rows.extend(rows_for(*policy, v, res, v));
                }
            }
        }
        _ => {
            for ((policy, v), res) in jobs.iter().zip(&results) {
                rows.extend(rows_for(*policy, *v, res, 1.0));
            }
        }
    }
    rows
}

/// A single sweep run.
pub fn run_point(cfg: &SimConfig, trace: &[TraceEvent], policy: PolicyKind, axis: Axis, value: f64) -> Result<SimOutput, SimError> {
    match axis {
        Axis::SloScale => run_policy(cfg, trace, policy),
        Axis::RateScale => {
            let scaled = rescale_trace(trace, value, cfg.seed).map_err(|e| crate::config::ConfigError::Invalid(e.to_string()))?;
            run_policy(cfg, &scaled, policy)
        }
        Axis::GpuCount => {
            if !(value >= 1.0) || value.fract() != 0.0 {
                return Err(crate::config::ConfigError::Invalid(format!("gpu_count {value} is not a positive integer")).into());
            }
            let mut c = cfg.clone();
            c.gpu_count = value as usize;
            run_policy(&c, trace, policy)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_round_trip() {
        for a in [Axis::RateScale, Axis::SloScale, Axis::GpuCount] {
            assert_eq!(a.name().parse::<Axis>().unwrap(), a);
        }
        assert!("latency".parse::<Axis>().is_err());
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<u64> = (0..100).collect();
        assert_eq!(par_map(&v, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
