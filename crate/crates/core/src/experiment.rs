//! Parameter sweeps over a base configuration, run in parallel.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::cluster::{run, SimOptions, SimulationError};
use crate::config::{RunConfig, TransferModeName};
use crate::gateway::GatewayPolicy;
use crate::metrics::{MetricsFrame, Summary};
use crate::perf_model::ThroughputEstimate;

/// Axes of a sweep. An empty axis keeps the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepSpec {
    /// Group whose composition the ratio axis changes. Defaults to the first.
    pub group: Option<String>,
    /// `(n_prefill, n_decode)` pairs.
    pub ratios: Vec<(u32, u32)>,
    /// Multipliers applied to every traffic rate.
    pub loads: Vec<f64>,
    pub modes: Vec<TransferModeName>,
    pub block_sizes: Vec<u64>,
    pub policies: Vec<GatewayPolicy>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    /// Every split of `total` instances with at least one of each role.
    pub fn all_splits(total: u32) -> Vec<(u32, u32)> {
        (1..total).map(|p| (p, total - p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub n_prefill: u32,
    pub n_decode: u32,
    pub load: f64,
    pub mode: TransferModeName,
    pub block_size: u64,
    pub policy: GatewayPolicy,
    pub seed: u64,
    pub summary: Summary,
    pub analytic: Option<ThroughputEstimate>,
    pub violations: usize,
    #[serde(skip)]
    pub frame: MetricsFrame,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Expands the grid into `(load multiplier, configuration)` pairs, in a
/// fixed order.
pub fn expand(base: &RunConfig, spec: &SweepSpec) -> Vec<(f64, RunConfig)> {
    let group = spec
        .group
        .clone()
        .or_else(|| base.groups.first().map(|g| g.name.clone()))
        .unwrap_or_default();
    let base_ratio = base.group(&group).map_or((1, 1), |g| (g.n_prefill, g.n_decode));
    let mut out = Vec::new();
    for &(p, d) in &axis(&spec.ratios, base_ratio) {
        for &load in &axis(&spec.loads, 1.0) {
            for &mode in &axis(&spec.modes, base.transfer.mode) {
                for &block in &axis(&spec.block_sizes, base.transfer.block_size) {
                    for &policy in &axis(&spec.policies, base.gateway.policy) {
                        for &seed in &axis(&spec.seeds, base.seed) {
                            let mut cfg = base.clone();
                            if let Some(g) = cfg.group_mut(&group) {
                                g.n_prefill = p;
                                g.n_decode = d;
                            }
                            if load != 1.0 {
                                cfg.scale_traffic(load);
                            }
                            cfg.transfer.mode = mode;
                            cfg.transfer.block_size = block;
                            cfg.gateway.policy = policy;
                            cfg.seed = seed;
                            cfg.name = format!("{}-{p}p{d}d-x{load}-{mode:?}-{block}-{policy:?}-s{seed}", base.name);
                            out.push((load, cfg));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Runs every grid point in parallel; results come back in grid order.
pub fn sweep(base: &RunConfig, spec: &SweepSpec) -> Result<Vec<SweepPoint>, SimulationError> {
    let group = spec
        .group
        .clone()
        .or_else(|| base.groups.first().map(|g| g.name.clone()))
        .unwrap_or_default();
    expand(base, spec)
        .into_par_iter()
        .map(|(load, cfg)| {
            let out = run(&cfg, SimOptions::default())?;
            let g = cfg.group(&group).expect("sweep group exists");
            let analytic = out
                .report
                .analytic
                .iter()
                .find(|a| a.group == group)
                .and_then(|a| a.estimate);
            Ok(SweepPoint {
                n_prefill: g.n_prefill,
                n_decode: g.n_decode,
                load,
                mode: cfg.transfer.mode,
                block_size: cfg.transfer.block_size,
                policy: cfg.gateway.policy,
                seed: cfg.seed,
                summary: out.report.summary,
                analytic,
                violations: out.report.violations.len(),
                frame: out.frame,
            })
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row per grid point.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from(
        "n_prefill,n_decode,load,mode,block_size,policy,seed,throughput,per_instance_rps,success_rate,tp,td,e2e,transfer_mean,analytic_per_instance_rps,violations\n",
    );
    for p in points {
        let mode = match p.mode {
            TransferModeName::BlockFree => "block_free",
            TransferModeName::BlockFixed => "block_fixed",
        };
        let policy = match p.policy {
            GatewayPolicy::Baseline => "baseline",
            GatewayPolicy::OnDemand => "on_demand",
        };
        let s = &p.summary;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            p.n_prefill,
            p.n_decode,
            p.load,
            mode,
            p.block_size,
            policy,
            p.seed,
            s.throughput,
            cell(s.per_instance_rps),
            cell(s.success_rate),
            cell(s.tp),
            cell(s.td),
            cell(s.e2e),
            cell(s.transfer_mean),
            cell(p.analytic.map(|a| a.per_instance_rps)),
            p.violations,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "sweep"
seed = 3
duration = 20.0
bucket = 5.0

[model]
hidden_size = 512
num_layers = 4
bytes_per_elem = 2
tp_degree = 1

[[scenarios]]
name = "s"
prompt_len = [[256, 1.0]]
output_len = [[8, 1.0]]
ttft_slo_ms = 1000.0
e2e_timeout_ms = 5000.0

[profiles.s]
ttft_ms = [[1, 50.0], [2, 80.0]]
tpot_ms = [[1, 10.0], [8, 20.0]]
prefix_benefit = 1.0

[[groups]]
name = "g"
scenarios = ["s"]
n_prefill = 1
n_decode = 1
batch_prefill = 2
batch_decode = 8

[[traffic.slots]]
start = 0.0
rates = { s = 4.0 }
"#;

    #[test]
    fn grid_order_and_size() {
        let base = RunConfig::from_toml(BASE).unwrap();
        let spec = SweepSpec {
            ratios: SweepSpec::all_splits(4),
            loads: vec![0.5, 1.0],
            ..Default::default()
        };
        let grid = expand(&base, &spec);
        assert_eq!(grid.len(), 6);
        assert_eq!(grid[0].1.groups[0].n_prefill, 1);
        assert_eq!(grid[5].1.groups[0].n_prefill, 3);
        assert_eq!(grid[0].1.traffic.slots[0].rates["s"], 2.0);
    }

    #[test]
    fn parallel_sweep_is_deterministic() {
        let base = RunConfig::from_toml(BASE).unwrap();
        let spec = SweepSpec {
            ratios: vec![(1, 1), (1, 2)],
            modes: vec![TransferModeName::BlockFree, TransferModeName::BlockFixed],
            ..Default::default()
        };
        let a = sweep(&base, &spec).unwrap();
        let b = sweep(&base, &spec).unwrap();
        assert_eq!(sweep_csv(&a), sweep_csv(&b));
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|p| p.violations == 0));
        assert_eq!(a[0].load, 1.0);
    }
}
