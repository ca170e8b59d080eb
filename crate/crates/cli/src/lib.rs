//! Command implementations behind the `gpushare` binary: `run`, `sweep`,
//! `verify` and `stats`. Each returns a [`CliError`] whose
//! [`exit_code`](CliError::exit_code) the binary passes to the shell.

pub mod config;

use config::{check_trace_models, RunConfig};
use gpushare::metrics::{RunRecord, SCHEMA_VERSION};
use gpushare::policies::PolicyKind;
use gpushare::sim::{run, SimError, SimOutput};
use gpushare::sweep::{sweep, Axis, SweepRow};
use gpushare::workload::{compute_stats, empirical_cdf, parse_trace, WorkloadStats};
use gpushare_oracle::{Suite, SuiteReport};
use serde::Serialize;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, trace or arguments.
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::Io { .. } => 1,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::Policy(_) | SimError::UnknownModel { .. } | SimError::RequestTooLarge { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(w).and_then(|()| w.flush()).map_err(io_err(path))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Options shared by `run` and `sweep`.
#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub config: PathBuf,
    pub trace: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn prepare(args: &RunArgs) -> Result<(RunConfig, gpushare::config::SimConfig, Vec<gpushare::workload::TraceEvent>), CliError> {
    let mut rc = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        rc.seed = s;
    }
    let cfg = rc.sim_config()?;
    let trace = rc.load_trace(args.trace.as_deref())?;
    check_trace_models(&cfg, &trace)?;
    Ok((rc, cfg, trace))
}

pub const RUN_FILES: [&str; 7] =
    ["metrics.json", "requests.csv", "kv_timeseries.csv", "kvpr_timeseries.csv", "queue_timeseries.csv", "swaps.csv", "plan_log.jsonl"];

/// Simulate one run and write its reports into `out`.
pub fn cmd_run(args: &RunArgs, out: &Path) -> Result<RunResult, CliError> {
    let (rc, cfg, trace) = prepare(args)?;
    let output = run(&cfg, &trace)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_run(out, &output.record, &output, rc.slo_scale)?;
    Ok(RunResult { output, slo_scale: rc.slo_scale })
}

pub struct RunResult {
    pub output: SimOutput,
    pub slo_scale: f64,
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    #[serde(flatten)]
    summary: gpushare::metrics::MetricsSummary,
    slo_scale: f64,
    ttft_attainment_scaled: f64,
    tpot_attainment_scaled: f64,
    swaps: &'a [gpushare::metrics::SwapRecord],
}

fn write_run(out: &Path, rec: &RunRecord, output: &SimOutput, slo_scale: f64) -> Result<(), CliError> {
    let scaled = rec.overall_attainment(slo_scale);
    let doc = MetricsDoc {
        summary: rec.summary(),
        slo_scale,
        ttft_attainment_scaled: scaled.ttft,
        tpot_attainment_scaled: scaled.tpot,
        swaps: &rec.swaps,
    };
    write_json(&out.join("metrics.json"), &doc)?;

    let p = out.join("requests.csv");
    let mut w = csv_writer(&p)?;
    w.write_record(["req_id", "model", "arrival", "ttft", "tpot", "preemptions"]).map_err(csv_err(&p))?;
    for r in &rec.requests {
        w.write_record([r.req_id.to_string(), r.model.clone(), r.arrival.to_string(), opt(r.ttft()), opt(r.tpot()), r.preemptions.to_string()])
            .map_err(csv_err(&p))?;
    }
    w.flush().map_err(io_err(&p))?;

    let p = out.join("kv_timeseries.csv");
    let mut w = csv_writer(&p)?;
    w.write_record(["time", "gpu", "mapped_bytes"]).map_err(csv_err(&p))?;
    for s in &rec.kv_series {
        w.write_record([s.time.to_string(), s.gpu.to_string(), s.mapped_bytes.to_string()]).map_err(csv_err(&p))?;
    }
    w.flush().map_err(io_err(&p))?;

    let p = out.join("kvpr_timeseries.csv");
    let mut w = csv_writer(&p)?;
    w.write_record(["time", "gpu", "kvpr"]).map_err(csv_err(&p))?;
    for s in &rec.kvpr_series {
        w.write_record([s.time.to_string(), s.gpu.to_string(), s.kvpr.to_string()]).map_err(csv_err(&p))?;
    }
    w.flush().map_err(io_err(&p))?;

    let p = out.join("queue_timeseries.csv");
    let mut w = csv_writer(&p)?;
    w.write_record(["time", "gpu", "model", "queue_len"]).map_err(csv_err(&p))?;
    for s in &rec.queue_series {
        w.write_record([s.time.to_string(), s.gpu.to_string(), s.model.clone(), s.queue_len.to_string()]).map_err(csv_err(&p))?;
    }
    w.flush().map_err(io_err(&p))?;

    let p = out.join("swaps.csv");
    let mut w = csv_writer(&p)?;
    w.write_record(["time", "gpu", "from", "to"]).map_err(csv_err(&p))?;
    for s in &rec.swaps {
        w.write_record([s.time.to_string(), s.gpu.to_string(), s.from.clone().unwrap_or_default(), s.to.clone()]).map_err(csv_err(&p))?;
    }
    w.flush().map_err(io_err(&p))?;

    let p = out.join("plan_log.jsonl");
    let mut w = create(&p)?;
    for plan in &output.plan_log {
        serde_json::to_writer(&mut w, plan).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(w).map_err(io_err(&p))?;
    }
    w.flush().map_err(io_err(&p))
}

/// The one-screen summary printed by `run`.
pub fn summary_text(rec: &RunRecord, slo_scale: f64) -> String {
    let mut s = String::new();
    let all = rec.overall_attainment(slo_scale);
    s += &format!(
        "policy {}  gpus {}  requests {}  unfinished {}\n",
        rec.policy,
        rec.gpu_count,
        rec.requests.len(),
        rec.unfinished
    );
    s += &format!(
        "ttft attainment {:.3}  tpot attainment {:.3}  throughput {:.1} tok/s (wall {:.1})\n",
        all.ttft,
        all.tpot,
        rec.throughput(None),
        rec.wall_throughput()
    );
    let c = &rec.counts;
    s += &format!(
        "activations {}  evictions {}  migrations {}  swaps {}  preemptions {}\n",
        c.activations, c.evictions, c.migrations, c.swaps, c.preemptions
    );
    s += &format!("{:<24} {:>8} {:>8} {:>12}\n", "model", "ttft", "tpot", "tok/s");
    for (m, a) in rec.attainment(slo_scale) {
        s += &format!("{:<24} {:>8.3} {:>8.3} {:>12.1}\n", m, a.ttft, a.tpot, rec.throughput(Some(&m)));
    }
    s
}

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub run: RunArgs,
    pub axis: Axis,
    pub values: Vec<f64>,
    pub policies: Vec<PolicyKind>,
}

pub const SWEEP_HEADER: [&str; 7] = ["policy", "axis_value", "model", "ttft_attainment", "tpot_attainment", "throughput", "errors"];

/// Run the sweep and write its long-format CSV to `out` (a file path).
/// Fails only when every cell failed.
pub fn cmd_sweep(args: &SweepArgs, out: Option<&Path>) -> Result<Vec<SweepRow>, CliError> {
    if args.values.is_empty() || args.policies.is_empty() {
        return Err(CliError::Config("sweep needs at least one value and one policy".into()));
    }
    let (_, cfg, trace) = prepare(&args.run)?;
    let rows = sweep(&cfg, &trace, &args.policies, args.axis, &args.values);
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            write_sweep(csv_writer(p)?, &rows).map_err(csv_err(p))?;
        }
        None => write_sweep(csv::Writer::from_writer(std::io::stdout()), &rows).map_err(|e| CliError::Runtime(e.to_string()))?,
    }
    if rows.iter().all(|r| !r.errors.is_empty()) {
        let first = rows.first().map(|r| r.errors.clone()).unwrap_or_default();
        return Err(CliError::Runtime(format!("every sweep cell failed; first error: {first}")));
    }
    Ok(rows)
}

fn write_sweep<W: Write>(mut w: csv::Writer<W>, rows: &[SweepRow]) -> Result<(), csv::Error> {
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.write_record([
            r.policy.clone(),
            r.axis_value.to_string(),
            r.model.clone(),
            r.ttft_attainment.to_string(),
            r.tpot_attainment.to_string(),
            r.throughput.to_string(),
            r.errors.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `all` or a single suite name.
pub fn parse_suites(s: &str) -> Result<Vec<Suite>, CliError> {
    if s == "all" {
        return Ok(Suite::ALL.to_vec());
    }
    s.parse::<Suite>().map(|x| vec![x]).map_err(CliError::Config)
}

/// Run the oracle and invariant suites.
pub fn cmd_verify(suites: &[Suite], seed: u64) -> Vec<SuiteReport> {
    suites.iter().map(|&s| gpushare_oracle::verify(s, seed)).collect()
}

/// Pass/fail counts per suite and the first failing instances, each as a
/// reproducible seed, index and JSON instance.
pub fn verify_text(reports: &[SuiteReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s += &format!("{:<10} {} {}/{} passed\n", r.suite, if r.ok() { "PASS" } else { "FAIL" }, r.passed, r.instances);
        if let Some(p) = &r.packing {
            s += &format!(
                "{:<10} packing worse than lowest-index after {} of {} checks; pages {} vs {}\n",
                "", p.worse, p.checks, p.mapped_sum, p.naive_sum
            );
        }
        for f in r.failures.iter().take(5) {
            s += &format!("  seed {} index {}: {}\n  {}\n", f.seed, f.index, f.detail, f.instance);
        }
        if r.failures.len() > 5 {
            s += &format!("  ... {} more\n", r.failures.len() - 5);
        }
    }
    s
}

#[derive(Serialize)]
pub struct StatsDoc {
    pub schema_version: u32,
    #[serde(flatten)]
    pub stats: WorkloadStats,
    /// Share of requests owned by the least popular 60% of models.
    pub least_popular_60pct_request_share: f64,
}

pub const STATS_FILES: [&str; 5] = ["stats.json", "request_count_cdf.csv", "median_idle_cdf.csv", "idle_per_hour_cdf.csv", "cv_cdf.csv"];

/// Workload statistics for a trace: `stats.json` plus CDF tables.
pub fn cmd_stats(trace: &Path, out: &Path, idle_threshold_s: f64) -> Result<StatsDoc, CliError> {
    let events = parse_trace(trace).map_err(|e| CliError::Config(format!("{}: {e}", trace.display())))?;
    let stats = compute_stats(&events, idle_threshold_s).map_err(|e| CliError::Config(e.to_string()))?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let counts: Vec<f64> = stats.models.values().map(|m| m.requests as f64).collect();
    let medians: Vec<f64> = stats.models.values().filter_map(|m| m.idle.as_ref().map(|i| i.median)).collect();
    let per_hour: Vec<f64> = stats.models.values().filter_map(|m| m.idle.as_ref().and_then(|i| i.over_threshold_per_hour)).collect();
    let cvs: Vec<f64> = stats.models.values().filter_map(|m| m.cv).collect();
    for (name, values) in [("request_count_cdf.csv", &counts), ("median_idle_cdf.csv", &medians), ("idle_per_hour_cdf.csv", &per_hour), ("cv_cdf.csv", &cvs)] {
        let p = out.join(name);
        let mut w = csv_writer(&p)?;
        w.write_record(["value", "cdf"]).map_err(csv_err(&p))?;
        for (v, f) in empirical_cdf(values) {
            w.write_record([v.to_string(), f.to_string()]).map_err(csv_err(&p))?;
        }
        w.flush().map_err(io_err(&p))?;
    }
    let doc = StatsDoc { schema_version: SCHEMA_VERSION, least_popular_60pct_request_share: stats.least_popular_share(0.6), stats };
    write_json(&out.join("stats.json"), &doc)?;
    Ok(doc)
}
