use clap::{Parser, Subcommand};
use gpushare::policies::PolicyKind;
use gpushare::sweep::{set_jobs, Axis};
use gpushare_cli::{cmd_run, cmd_stats, cmd_sweep, cmd_verify, parse_suites, summary_text, verify_text, CliError, RunArgs, SweepArgs};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gpushare", version, about = "Simulate multi-model LLM serving on shared GPUs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one configuration and write metrics, per-request and time-series reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the trace named in the config.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every policy at every axis value; writes a long-format CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// rate_scale, slo_scale or gpu_count.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Comma-separated policy names.
        #[arg(long, value_delimiter = ',', default_value = "prism,static_partition,mux_flexible,qlm_timeshare")]
        policies: Vec<String>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Check the schedulers against brute-force oracles and the allocator invariants.
    Verify {
        /// deadline, placement, allocator or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Popularity, burstiness and idle-interval statistics of a trace.
    Stats {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Gaps longer than this count as idle intervals.
        #[arg(long, default_value_t = 10.0)]
        idle_threshold: f64,
    },
}

fn jobs(n: Option<usize>) -> Result<(), CliError> {
    match n {
        Some(0) => Err(CliError::Config("--jobs must be at least 1".into())),
        Some(n) => set_jobs(n).map_err(CliError::Runtime),
        None => Ok(()),
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Run { config, trace, out, seed } => {
            let r = cmd_run(&RunArgs { config, trace, seed }, &out)?;
            print!("{}", summary_text(&r.output.record, r.slo_scale));
            println!("reports written to {}", out.display());
        }
        Cmd::Sweep { config, trace, out, seed, axis, values, policies, jobs: j } => {
            jobs(j)?;
            let axis: Axis = axis.parse().map_err(CliError::Config)?;
            let policies = policies
                .iter()
                .map(|p| p.parse::<PolicyKind>().map_err(|e| CliError::Config(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            cmd_sweep(&SweepArgs { run: RunArgs { config, trace, seed }, axis, values, policies }, out.as_deref())?;
        }
        Cmd::Verify { suite, seed, jobs: j } => {
            jobs(j)?;
            let reports = cmd_verify(&parse_suites(&suite)?, seed);
            print!("{}", verify_text(&reports));
            let failed: Vec<&str> = reports.iter().filter(|r| !r.ok()).map(|r| r.suite).collect();
            if !failed.is_empty() {
                return Err(CliError::Runtime(format!("verification failed: {}", failed.join(", "))));
            }
        }
        Cmd::Stats { trace, out, idle_threshold } => {
            let doc = cmd_stats(&trace, &out, idle_threshold)?;
            println!("{} requests, {} models, span {:.1} s", doc.stats.total_requests, doc.stats.models.len(), doc.stats.span_s);
            println!("least popular 60% of models own {:.1}% of requests", 100.0 * doc.least_popular_60pct_request_share);
            println!("reports written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {:#}", anyhow::Error::new(e));
            ExitCode::from(code as u8)
        }
    }
}
