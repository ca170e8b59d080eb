//! Synthetic workloads used by the acceptance suite, benches and examples.

use crate::config::SimConfig;
use crate::enginemodel::ModelSpec;
use crate::rng::substream;
use crate::workload::{synth_trace, LengthDist, ModelProfile, RateSegment, SynthSpec, TraceEvent, WorkloadError};
use rand::Rng;

pub const H100_BYTES: u64 = 80_000_000_000;

fn chat() -> (LengthDist, LengthDist) {
    (LengthDist { median: 1024.0, sigma: 0.5, max: 4096 }, LengthDist { median: 256.0, sigma: 0.5, max: 1024 })
}

/// Alternating active/idle phases over `[0, duration)`: active 20 to 40 s,
/// idle 120 to 300 s, starting at a random phase.
fn bursty<R: Rng>(rng: &mut R, duration: f64, rate: f64) -> Vec<RateSegment> {
    let mut t = rng.random_range(0.0..200.0);
    let mut out = Vec::new();
    while t < duration {
        let end = (t + rng.random_range(20.0..40.0)).min(duration);
        out.push(RateSegment { start: t, end, rate });
        t = end + rng.random_range(120.0..300.0);
    }
    out
}

/// Eight models on two GPUs: two hot 8B-class models with steady load and
/// six long-tail models (two 14B, four 8B) that are idle most of the time.
/// Keeping every model resident leaves little KV memory.
pub fn long_tail_mix(seed: u64, hot_rate: f64, tail_rate: f64, duration: f64) -> Result<(SimConfig, Vec<TraceEvent>), WorkloadError> {
    let mut rng = substream(seed, "scenario/long-tail");
    let (prompt, output) = chat();
    let mut models = vec![ModelSpec::class_8b("hot-0").with_slos(1.0, 0.1), ModelSpec::class_8b("hot-1").with_slos(1.0, 0.1)];
    for i in 0..6 {
        let spec = if i < 2 { ModelSpec::class_14b(&format!("tail-{i}")) } else { ModelSpec::class_8b(&format!("tail-{i}")) };
        models.push(spec.with_slos(5.0, 0.2));
    }
    let profiles = models
        .iter()
        .map(|m| ModelProfile {
            model: m.id.clone(),
            segments: if m.id.starts_with("hot") {
                vec![RateSegment { start: 0.0, end: duration, rate: hot_rate }]
            } else {
                bursty(&mut rng, duration, tail_rate)
            },
            prompt,
            output,
        })
        .collect();
    let trace = synth_trace(&SynthSpec { models: profiles, seed })?;
    let mut cfg = SimConfig::new(models, 2, H100_BYTES);
    cfg.seed = seed;
    Ok((cfg, trace))
}

/// Two models sharing one GPU. The first is busy throughout; the second is
/// quiet, then surges during `[surge_start, surge_end)`.
pub fn two_phase(seed: u64, base_rate: f64, surge_rate: f64) -> Result<(SimConfig, Vec<TraceEvent>, (f64, f64)), WorkloadError> {
    let (prompt, output) = chat();
    let surge = (120.0, 240.0);
    let duration = 360.0;
    let models = vec![ModelSpec::class_8b("steady").with_slos(2.0, 0.2), ModelSpec::class_8b("surging").with_slos(2.0, 0.2)];
    let profiles = vec![
        ModelProfile {
            model: "steady".into(),
            segments: vec![RateSegment { start: 0.0, end: duration, rate: base_rate }],
            prompt,
            output,
        },
        ModelProfile {
            model: "surging".into(),
            segments: vec![
                RateSegment { start: 0.0, end: surge.0, rate: base_rate / 4.0 },
                RateSegment { start: surge.0, end: surge.1, rate: surge_rate },
                RateSegment { start: surge.1, end: duration, rate: base_rate / 4.0 },
            ],
            prompt,
            output,
        },
    ];
    let trace = synth_trace(&SynthSpec { models: profiles, seed })?;
    let mut cfg = SimConfig::new(models, 1, H100_BYTES);
    cfg.seed = seed;
    Ok((cfg, trace, surge))
}

/// Two models colocated on one 56 GB GPU, so the KV space left after both
/// sets of weights is small: one with a strict TTFT SLO and short requests,
/// one with a loose SLO and long prompts and outputs that hold memory.
pub fn strict_and_loose(seed: u64, strict_rate: f64, loose_rate: f64) -> Result<(SimConfig, Vec<TraceEvent>), WorkloadError> {
    let duration = 300.0;
    let models = vec![
        ModelSpec::class_8b("strict").with_slos(0.5, 0.2),
        ModelSpec::class_14b("loose").with_slos(8.0, 0.5),
    ];
    let profiles = vec![
        ModelProfile {
            model: "strict".into(),
            segments: vec![RateSegment { start: 0.0, end: duration, rate: strict_rate }],
            prompt: LengthDist { median: 256.0, sigma: 0.3, max: 1024 },
            output: LengthDist { median: 128.0, sigma: 0.3, max: 512 },
        },
        ModelProfile {
            model: "loose".into(),
            segments: vec![RateSegment { start: 0.0, end: duration, rate: loose_rate }],
            prompt: LengthDist { median: 3072.0, sigma: 0.3, max: 8192 },
            output: LengthDist { median: 512.0, sigma: 0.3, max: 2048 },
        },
    ];
    let trace = synth_trace(&SynthSpec { models: profiles, seed })?;
    let mut cfg = SimConfig::new(models, 1, 56_000_000_000);
    cfg.seed = seed;
    Ok((cfg, trace))
}
