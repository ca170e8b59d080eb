//! Per-request latencies, SLO attainment, throughput and time series
//! collected by a simulation run.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub req_id: u64,
    pub model: String,
    pub arrival: f64,
    pub prompt: u32,
    pub output: u32,
    /// `None` when the run stopped at its horizon before this happened.
    pub first_token: Option<f64>,
    pub completion: Option<f64>,
    pub preemptions: u32,
}

impl RequestRecord {
    pub fn ttft(&self) -> Option<f64> {
        self.first_token.map(|t| t - self.arrival)
    }
    /// Mean time per output token after the first; `None` for
    /// single-token outputs and unfinished requests.
    pub fn tpot(&self) -> Option<f64> {
        match (self.first_token, self.completion) {
            (Some(f), Some(c)) if self.output >= 2 => Some((c - f) / f64::from(self.output - 1)),
            _ => None,
        }
    }
    pub fn finished(&self) -> bool {
        self.completion.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slo {
    pub ttft_s: f64,
    pub tpot_s: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Attainment {
    pub ttft: f64,
    pub tpot: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub migrations: u64,
    pub evictions: u64,
    pub activations: u64,
    pub preemptions: u64,
    pub swaps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvSample {
    pub time: f64,
    pub gpu: usize,
    pub mapped_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvprSample {
    pub time: f64,
    pub gpu: usize,
    pub kvpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSample {
    pub time: f64,
    pub gpu: usize,
    pub model: String,
    pub queue_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapRecord {
    pub time: f64,
    pub gpu: usize,
    pub from: Option<String>,
    pub to: String,
}

/// Everything recorded during one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub policy: String,
    pub seed: u64,
    pub gpu_count: usize,
    pub slos: BTreeMap<String, Slo>,
    pub requests: Vec<RequestRecord>,
    /// Maximal intervals with at least one queued or running request, per model.
    pub busy: BTreeMap<String, Vec<(f64, f64)>>,
    pub counts: Counts,
    pub kv_series: Vec<KvSample>,
    pub kvpr_series: Vec<KvprSample>,
    pub queue_series: Vec<QueueSample>,
    pub swaps: Vec<SwapRecord>,
    pub end_time: f64,
    /// Requests still outstanding when the run hit its drain horizon.
    pub unfinished: usize,
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

/// Length of the union of possibly overlapping intervals.
pub fn union_length(intervals: &[(f64, f64)]) -> f64 {
    let mut v: Vec<(f64, f64)> = intervals.iter().copied().filter(|(a, b)| b > a).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (a, b) in v {
        match cur {
            Some((s, e)) if a <= e => cur = Some((s, e.max(b))),
            Some((s, e)) => {
                total += e - s;
                cur = Some((a, b));
            }
            None => cur = Some((a, b)),
        }
    }
    if let Some((s, e)) = cur {
        total += e - s;
    }
    total
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

impl RunRecord {
    /// Per-model attainment with every SLO multiplied by `slo_scale`.
    pub fn attainment(&self, slo_scale: f64) -> BTreeMap<String, Attainment> {
        self.slos
            .keys()
            .map(|m| {
                let reqs: Vec<&RequestRecord> = self.requests.iter().filter(|r| &r.model == m).collect();
                (m.clone(), self.attainment_of(&reqs, slo_scale))
            })
            .collect()
    }

    /// Attainment over all requests of the run.
    pub fn overall_attainment(&self, slo_scale: f64) -> Attainment {
        let reqs: Vec<&RequestRecord> = self.requests.iter().collect();
        self.attainment_of(&reqs, slo_scale)
    }

    /// Unfinished requests count as misses for both SLOs.
    fn attainment_of(&self, reqs: &[&RequestRecord], scale: f64) -> Attainment {
        let ttft_ok = reqs
            .iter()
            .filter(|r| r.ttft().is_some_and(|t| t <= scale * self.slos[&r.model].ttft_s))
            .count();
        let with_tpot: Vec<f64> = reqs
            .iter()
            .filter(|r| r.output >= 2)
            .map(|r| r.tpot().map_or(f64::INFINITY, |t| t / self.slos[&r.model].tpot_s))
            .collect();
        let tpot_ok = with_tpot.iter().filter(|&&x| x <= scale).count();
        Attainment { ttft: fraction(ttft_ok, reqs.len()), tpot: fraction(tpot_ok, with_tpot.len()) }
    }

    pub fn output_tokens(&self, model: Option<&str>) -> u64 {
        self.requests
            .iter()
            .filter(|r| r.finished() && model.map_or(true, |m| r.model == m))
            .map(|r| u64::from(r.output))
            .sum()
    }

    pub fn busy_time(&self, model: &str) -> f64 {
        self.busy.get(model).map_or(0.0, |v| union_length(v))
    }

    /// Union of all models' busy intervals.
    pub fn cluster_busy_time(&self) -> f64 {
        let all: Vec<(f64, f64)> = self.busy.values().flatten().copied().collect();
        union_length(&all)
    }

    /// Output tokens per second of non-idle time.
    pub fn throughput(&self, model: Option<&str>) -> f64 {
        let t = match model {
            Some(m) => self.busy_time(m),
            None => self.cluster_busy_time(),
        };
        if t > 0.0 {
            self.output_tokens(model) as f64 / t
        } else {
            0.0
        }
    }

    /// Output tokens per second from first arrival to last completion.
    pub fn wall_throughput(&self) -> f64 {
        let start = self.requests.iter().map(|r| r.arrival).fold(f64::INFINITY, f64::min);
        let end = self.requests.iter().filter_map(|r| r.completion).fold(0.0, f64::max);
        if end > start {
            self.output_tokens(None) as f64 / (end - start)
        } else {
            0.0
        }
    }

    /// Mapped KV bytes on `gpu` just after every event at time `t`.
    pub fn kv_at(&self, gpu: usize, t: f64) -> u64 {
        self.kv_series
            .iter()
            .rev()
            .find(|s| s.gpu == gpu && s.time <= t)
            .map_or(0, |s| s.mapped_bytes)
    }

    /// Integral of mapped KV bytes over `[from, to)` for one GPU, byte-seconds.
    pub fn kv_integral(&self, gpu: usize, from: f64, to: f64) -> f64 {
        let mut level = 0.0;
        let mut t = from;
        let mut acc = 0.0;
        for s in self.kv_series.iter().filter(|s| s.gpu == gpu) {
            if s.time <= from {
                level = s.mapped_bytes as f64;
                continue;
            }
            if s.time >= to {
                break;
            }
            acc += level * (s.time - t);
            t = s.time;
            level = s.mapped_bytes as f64;
        }
        if to > t {
            acc += level * (to - t);
        }
        acc
    }

    pub fn summary(&self) -> MetricsSummary {
        let att = self.attainment(1.0);
        let models = self
            .slos
            .keys()
            .map(|m| {
                let mut ttfts: Vec<f64> = self.requests.iter().filter(|r| &r.model == m).filter_map(RequestRecord::ttft).collect();
                ttfts.sort_by(f64::total_cmp);
                let tpots: Vec<f64> = self.requests.iter().filter(|r| &r.model == m).filter_map(RequestRecord::tpot).collect();
                let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
                (
                    m.clone(),
                    ModelSummary {
                        requests: self.requests.iter().filter(|r| &r.model == m).count(),
                        ttft_attainment: att[m].ttft,
                        tpot_attainment: att[m].tpot,
                        mean_ttft_s: mean(&ttfts),
                        p50_ttft_s: percentile(&ttfts, 0.5),
                        p99_ttft_s: percentile(&ttfts, 0.99),
                        mean_tpot_s: mean(&tpots),
                        output_tokens: self.output_tokens(Some(m)),
                        busy_s: self.busy_time(m),
                        throughput: self.throughput(Some(m)),
                    },
                )
            })
            .collect();
        let overall = self.overall_attainment(1.0);
        let kv_byte_seconds = (0..self.gpu_count).map(|g| self.kv_integral(g, 0.0, self.end_time)).collect();
        MetricsSummary {
            schema_version: SCHEMA_VERSION,
            policy: self.policy.clone(),
            seed: self.seed,
            gpu_count: self.gpu_count,
            requests: self.requests.len(),
            ttft_attainment: overall.ttft,
            tpot_attainment: overall.tpot,
            throughput: self.throughput(None),
            wall_throughput: self.wall_throughput(),
            busy_s: self.cluster_busy_time(),
            end_time_s: self.end_time,
            unfinished: self.unfinished,
            counts: self.counts.clone(),
            kv_byte_seconds,
            models,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub requests: usize,
    pub ttft_attainment: f64,
    pub tpot_attainment: f64,
    pub mean_ttft_s: f64,
    pub p50_ttft_s: f64,
    pub p99_ttft_s: f64,
    pub mean_tpot_s: f64,
    pub output_tokens: u64,
    pub busy_s: f64,
    pub throughput: f64,
}

/// The metrics JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub schema_version: u32,
    pub policy: String,
    pub seed: u64,
    pub gpu_count: usize,
    pub requests: usize,
    pub ttft_attainment: f64,
    pub tpot_attainment: f64,
    /// Output tokens/s over the union of busy intervals.
    pub throughput: f64,
    pub wall_throughput: f64,
    pub busy_s: f64,
    pub end_time_s: f64,
    pub unfinished: usize,
    pub counts: Counts,
    pub kv_byte_seconds: Vec<f64>,
    pub models: BTreeMap<String, ModelSummary>,
}
