//! Discrete-event simulator and analytic models for disaggregated
//! prefill/decode LLM serving.

// `!(x > 0.0)` style checks are how inputs reject NaN here.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod config;
pub mod control_plane;
pub mod experiment;
pub mod gateway;
pub mod instance;
pub mod metrics;
pub mod perf_model;
pub mod sim;
pub mod transfer;
pub mod workload;

pub use cluster::{run, RunOutput, RunReport, SimOptions, SimulationError};
pub use config::{ConfigError, RunConfig};
pub use experiment::{sweep, sweep_csv, SweepPoint, SweepSpec};
pub use metrics::{MetricsError, MetricsFrame, ScenarioStats, Summary};
