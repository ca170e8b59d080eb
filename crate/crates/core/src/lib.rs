//! Trace-driven simulation of many LLMs sharing a GPU cluster.

// `!(x >= 0.0)` is how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod enginemodel;
pub mod global_sched;
pub mod local_sched;
pub mod metrics;
pub mod pagealloc;
pub mod policies;
pub mod rng;
pub mod scenarios;
pub mod sim;
pub mod sweep;
pub mod time;
pub mod workload;
