//! Fixtures shared by the benchmarks.

use pdsim_core::perf_model::{LatencyTable, PerfProfile};
use pdsim_core::RunConfig;

/// A 2P2D cluster serving one scenario for a simulated minute.
pub const SMALL_RUN: &str = r#"
name = "bench"
seed = 1
duration = 60.0
warmup = 10.0
drain = 10.0

[model]
hidden_size = 4096
num_layers = 32
bytes_per_elem = 2
tp_degree = 1

[[scenarios]]
name = "chat"
prompt_len = [[512, 0.5], [2048, 0.5]]
output_len = [[64, 1.0]]
prefixes = [{ name = "sys", len = 128 }]
ttft_slo_ms = 3000.0
e2e_timeout_ms = 30000.0

[profiles.chat]
ttft_ms = [[1, 80.0], [4, 200.0]]
tpot_ms = [[1, 15.0], [32, 30.0]]
prefix_benefit = 0.8

[[groups]]
name = "main"
scenarios = ["chat"]
n_prefill = 2
n_decode = 2
batch_prefill = 4
batch_decode = 32

[[traffic.slots]]
start = 0.0
rates = { chat = 20.0 }
"#;

pub fn small_run() -> RunConfig {
    RunConfig::from_toml(SMALL_RUN).expect("bench config parses")
}

pub fn profile() -> PerfProfile {
    let ttft = LatencyTable::new(vec![(1, 0.08), (2, 0.12), (4, 0.2), (8, 0.35)]).expect("ttft table");
    let tpot = LatencyTable::new(vec![(1, 0.015), (16, 0.022), (64, 0.04)]).expect("tpot table");
    PerfProfile::new(ttft, tpot, 0.8, 128.0, 0.02).expect("profile")
}

/// `layers` deterministic tensors of `len` bytes each.
pub fn layers(layers: usize, len: usize) -> Vec<Vec<u8>> {
    (0..layers)
        .map(|i| (0..len).map(|j| (i * 31 + j) as u8).collect())
        .collect()
}
