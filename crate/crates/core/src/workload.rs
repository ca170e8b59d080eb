//! Multi-model request traces: JSONL ingestion, replication scaling,
//! Poisson synthesis and per-model statistics (popularity, idle gaps,
//! per-minute burstiness).

use crate::rng::substream;
use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed trace event: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Validation { line: usize, msg: String },
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// One request in a trace. Field names on the wire are `t`, `model`,
/// `prompt`, `output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    #[serde(rename = "t")]
    pub arrival_time: f64,
    #[serde(rename = "model")]
    pub model_id: String,
    #[serde(rename = "prompt")]
    pub prompt_tokens: u32,
    /// Only the execution engine may look at this; schedulers must not.
    #[serde(rename = "output")]
    pub output_tokens: u32,
}

impl TraceEvent {
    pub fn new(t: f64, model: impl Into<String>, prompt: u32, output: u32) -> Self {
        TraceEvent {
            arrival_time: t,
            model_id: model.into(),
            prompt_tokens: prompt,
            output_tokens: output,
        }
    }
}

fn validate_event(ev: &TraceEvent, prev_t: Option<f64>, line: usize) -> Result<(), WorkloadError> {
    let bad = |msg: String| Err(WorkloadError::Validation { line, msg });
    if !ev.arrival_time.is_finite() || ev.arrival_time < 0.0 {
        return bad(format!("arrival time {} must be a non-negative number", ev.arrival_time));
    }
    if ev.prompt_tokens == 0 {
        return bad("prompt_tokens must be >= 1".into());
    }
    if ev.output_tokens == 0 {
        return bad("output_tokens must be >= 1".into());
    }
    if ev.model_id.is_empty() {
        return bad("model id must be non-empty".into());
    }
    if let Some(p) = prev_t {
        if ev.arrival_time < p {
            return bad(format!("arrival time {} precedes previous event at {}", ev.arrival_time, p));
        }
    }
    Ok(())
}

/// Parse a JSONL trace from any reader. Blank lines are skipped.
pub fn parse_trace_reader<R: BufRead>(reader: R) -> Result<Vec<TraceEvent>, WorkloadError> {
    let mut out = Vec::new();
    let mut prev = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| WorkloadError::Parse { line: lineno, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: TraceEvent = serde_json::from_str(&line)
            .map_err(|e| WorkloadError::Parse { line: lineno, msg: e.to_string() })?;
        validate_event(&ev, prev, lineno)?;
        prev = Some(ev.arrival_time);
        out.push(ev);
    }
    Ok(out)
}

pub fn parse_trace(path: impl AsRef<Path>) -> Result<Vec<TraceEvent>, WorkloadError> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_trace_reader(BufReader::new(f))
}

pub fn write_trace<W: Write>(mut w: W, events: &[TraceEvent]) -> std::io::Result<()> {
    for ev in events {
        serde_json::to_writer(&mut w, ev)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Check ordering and field invariants of an in-memory trace.
pub fn validate_trace(events: &[TraceEvent]) -> Result<(), WorkloadError> {
    let mut prev = None;
    for (i, ev) in events.iter().enumerate() {
        validate_event(ev, prev, i + 1)?;
        prev = Some(ev.arrival_time);
    }
    Ok(())
}

/// Jitter window for replicated events, seconds.
pub const SCALE_JITTER_S: f64 = 1.0;

fn sort_events(events: &mut [TraceEvent]) {
    // stable: ties keep generation order
    events.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
}

/// Replicate every event `factor` times. The first copy keeps its original
/// timestamp; the others are shifted by a seeded uniform draw in
/// `[0, SCALE_JITTER_S)`. Prompt and output lengths are copied verbatim.
pub fn scale_trace(events: &[TraceEvent], factor: u32, seed: u64) -> Result<Vec<TraceEvent>, WorkloadError> {
    if factor == 0 {
        return Err(WorkloadError::Argument("scale factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(events.to_vec());
    }
    let mut rng = substream(seed, "jitter");
    let mut out = Vec::with_capacity(events.len() * factor as usize);
    for ev in events {
        out.push(ev.clone());
        for _ in 1..factor {
            let mut copy = ev.clone();
            copy.arrival_time += rng.random_range(0.0..SCALE_JITTER_S);
            out.push(copy);
        }
    }
    sort_events(&mut out);
    Ok(out)
}

/// Real-valued load scaling: `floor(factor)` replicas per event as in
/// [`scale_trace`], plus one more with probability `fract(factor)`.
/// Integer factors give exactly the [`scale_trace`] result.
pub fn rescale_trace(events: &[TraceEvent], factor: f64, seed: u64) -> Result<Vec<TraceEvent>, WorkloadError> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(WorkloadError::Argument(format!("rate scale {factor} must be positive")));
    }
    if factor.fract() == 0.0 {
        return scale_trace(events, factor as u32, seed);
    }
    let whole = factor.trunc() as u32;
    let frac = factor.fract();
    let mut jitter = substream(seed, "jitter");
    let mut thin = substream(seed, "thinning");
    let mut out = Vec::new();
    for ev in events {
        let extra = u32::from(thin.random_bool(frac));
        let copies = whole + extra;
        for k in 0..copies {
            let mut copy = ev.clone();
            if k > 0 {
                copy.arrival_time += jitter.random_range(0.0..SCALE_JITTER_S);
            }
            out.push(copy);
        }
    }
    sort_events(&mut out);
    Ok(out)
}

/// Idle-gap statistics for one model; absent when it has fewer than two arrivals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdleStats {
    pub intervals: Vec<f64>,
    pub median: f64,
    pub intervals_over_threshold: usize,
    /// `intervals_over_threshold` normalized by the trace span in hours;
    /// `None` for a zero-length trace.
    pub over_threshold_per_hour: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub requests: usize,
    pub per_minute: Vec<u64>,
    /// Population CV of requests per minute; `None` when the mean is zero.
    pub cv: Option<f64>,
    pub idle: Option<IdleStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadStats {
    pub total_requests: usize,
    pub span_s: f64,
    pub idle_threshold_s: f64,
    pub models: BTreeMap<String, ModelStats>,
}

/// Population mean and CV (σ/μ, σ divides by n).
pub fn coefficient_of_variation(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return None;
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some(var.sqrt() / mean)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Per-model workload statistics. Minute bins are anchored at the first
/// arrival of the whole trace, so results do not depend on where the trace
/// sits on the absolute clock.
pub fn compute_stats(events: &[TraceEvent], idle_threshold_s: f64) -> Result<WorkloadStats, WorkloadError> {
    if events.is_empty() {
        return Err(WorkloadError::Argument("trace is empty".into()));
    }
    let t0 = events.iter().map(|e| e.arrival_time).fold(f64::INFINITY, f64::min);
    let t1 = events.iter().map(|e| e.arrival_time).fold(f64::NEG_INFINITY, f64::max);
    let span = t1 - t0;
    let bins = (span / 60.0).floor() as usize + 1;

    let mut arrivals: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for ev in events {
        arrivals.entry(ev.model_id.as_str()).or_default().push(ev.arrival_time);
    }

    let mut models = BTreeMap::new();
    for (model, mut times) in arrivals {
        times.sort_by(f64::total_cmp);
        let mut per_minute = vec![0u64; bins];
        for &t in &times {
            let b = (((t - t0) / 60.0).floor() as usize).min(bins - 1);
            per_minute[b] += 1;
        }
        let samples: Vec<f64> = per_minute.iter().map(|&c| c as f64).collect();
        let cv = coefficient_of_variation(&samples);
        let idle = if times.len() < 2 {
            None
        } else {
            let intervals: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
            let over = intervals.iter().filter(|&&g| g > idle_threshold_s).count();
            Some(IdleStats {
                median: median(&intervals).unwrap_or(0.0),
                intervals_over_threshold: over,
                over_threshold_per_hour: (span > 0.0).then(|| over as f64 / (span / 3600.0)),
                intervals,
            })
        };
        models.insert(
            model.to_string(),
            ModelStats { requests: times.len(), per_minute, cv, idle },
        );
    }
    Ok(WorkloadStats { total_requests: events.len(), span_s: span, idle_threshold_s, models })
}

impl WorkloadStats {
    /// Fraction of all requests owned by the least popular `model_fraction`
    /// of models (rounded to the nearest whole model count).
    pub fn least_popular_share(&self, model_fraction: f64) -> f64 {
        let mut counts: Vec<usize> = self.models.values().map(|m| m.requests).collect();
        counts.sort_unstable();
        let k = ((model_fraction * counts.len() as f64).round() as usize).min(counts.len());
        let tail: usize = counts[..k].iter().sum();
        tail as f64 / self.total_requests as f64
    }
}

/// Empirical CDF as (value, cumulative fraction) steps, sorted by value.
pub fn empirical_cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = frac,
            _ => out.push((*x, frac)),
        }
    }
    out
}

/// Lognormal length distribution parameterized by its median and shape σ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthDist {
    pub median: f64,
    pub sigma: f64,
    pub max: u32,
}

impl LengthDist {
    pub fn fixed(n: u32) -> Self {
        LengthDist { median: n as f64, sigma: 0.0, max: n }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        if self.sigma <= 0.0 {
            return (self.median.round() as u32).clamp(1, self.max.max(1));
        }
        let d = LogNormal::new(self.median.ln(), self.sigma).expect("validated lognormal");
        (d.sample(rng).round() as u32).clamp(1, self.max.max(1))
    }
}

/// A constant-rate segment `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSegment {
    pub start: f64,
    pub end: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub model: String,
    pub segments: Vec<RateSegment>,
    pub prompt: LengthDist,
    pub output: LengthDist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub models: Vec<ModelProfile>,
    pub seed: u64,
}

fn validate_synth(spec: &SynthSpec) -> Result<(), WorkloadError> {
    for p in &spec.models {
        for s in &p.segments {
            if !(s.rate.is_finite() && s.rate >= 0.0) {
                return Err(WorkloadError::Argument(format!("{}: rate {} must be finite and >= 0", p.model, s.rate)));
            }
            if !(s.start.is_finite() && s.end.is_finite() && s.start >= 0.0 && s.end >= s.start) {
                return Err(WorkloadError::Argument(format!("{}: bad segment [{}, {})", p.model, s.start, s.end)));
            }
        }
        for d in [&p.prompt, &p.output] {
            if !(d.median >= 1.0 && d.sigma >= 0.0 && d.max >= 1) {
                return Err(WorkloadError::Argument(format!("{}: bad length distribution {d:?}", p.model)));
            }
        }
    }
    Ok(())
}

/// Poisson arrivals per model and per constant-rate segment.
pub fn synth_trace(spec: &SynthSpec) -> Result<Vec<TraceEvent>, WorkloadError> {
    validate_synth(spec)?;
    let mut out = Vec::new();
    for p in &spec.models {
        let mut rng = substream(spec.seed, &format!("trace/{}", p.model));
        for seg in &p.segments {
            if seg.rate == 0.0 || seg.end <= seg.start {
                continue;
            }
            let gap = Exp::new(seg.rate).expect("positive rate");
            let mut t = seg.start;
            loop {
                t += gap.sample(&mut rng);
                if t >= seg.end {
                    break;
                }
                let prompt = p.prompt.sample(&mut rng);
                let output = p.output.sample(&mut rng);
                // microsecond grid, matching the simulator clock
                let t_us = (t * 1e6).round() / 1e6;
                out.push(TraceEvent::new(t_us, p.model.clone(), prompt, output));
            }
        }
    }
    sort_events(&mut out);
    Ok(out)
}

/// Distinct model ids in first-appearance order.
pub fn trace_models(events: &[TraceEvent]) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for ev in events {
        if seen.insert(ev.model_id.as_str()) {
            out.push(ev.model_id.clone());
        }
    }
    out
}
