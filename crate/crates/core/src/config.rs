//! Run configuration.
//!
//! [`RunConfig`] mirrors the TOML file exactly: latencies are milliseconds,
//! absolute simulation times (duration, event times) are seconds, sizes are
//! bytes and bandwidth is bytes per second. [`RunConfig::resolve`] validates
//! cross-references and converts everything to seconds.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control_plane::{ControlTiming, FaultLevel, GroupSpec, ModelStore, Role, RoleLoad};
use crate::gateway::{GatewayConfig, GatewayPolicy};
use crate::instance::PrefillMode;
use crate::perf_model::{kvcache_size_bytes, ClusterShape, LatencyTable, PerfProfile};
use crate::sim::DelayDist;
use crate::transfer::{LinkModel, TransferMode};
use crate::workload::{DiscreteDist, PrefixSpec, ScenarioId, ScenarioSpec, TrafficSlot, TrafficTrace, Workload};

const MS: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_size: u64,
    pub num_layers: u64,
    pub bytes_per_elem: u64,
    /// Devices per instance; each transfer splits into this many sub-transfers.
    pub tp_degree: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_size: 4096,
            num_layers: 32,
            bytes_per_elem: 2,
            tp_degree: 8,
        }
    }
}

impl ModelConfig {
    pub fn kv_bytes(&self, tokens: u32) -> Option<u64> {
        kvcache_size_bytes(1, self.hidden_size, u64::from(tokens), self.num_layers, self.bytes_per_elem).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub prompt_len: DiscreteDist,
    pub output_len: DiscreteDist,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prefixes: Vec<PrefixSpec>,
    pub ttft_slo_ms: f64,
    pub e2e_timeout_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub ttft_ms: LatencyTable,
    pub tpot_ms: LatencyTable,
    pub prefix_benefit: f64,
    /// Defaults to the scenario's mean output length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_generated_tokens: Option<f64>,
    /// Analytic transfer time. Defaults to the link model's conflict-free
    /// time for the mean prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub name: String,
    #[serde(default = "default_service")]
    pub service: String,
    pub scenarios: Vec<String>,
    pub n_prefill: u32,
    pub n_decode: u32,
    pub batch_prefill: u32,
    pub batch_decode: u32,
}

fn default_service() -> String {
    "default".into()
}

impl GroupConfig {
    pub fn shape(&self) -> ClusterShape {
        ClusterShape {
            n_prefill: self.n_prefill,
            n_decode: self.n_decode,
            batch_prefill: self.batch_prefill,
            batch_decode: self.batch_decode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficConfig {
    pub slots: Vec<TrafficSlot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub policy: GatewayPolicy,
    pub retry_subset_size: u32,
    pub retry_interval_ms: f64,
    pub batch_window_factor: f64,
}

impl Default for GatewaySection {
    fn default() -> Self {
        let g = GatewayConfig::default();
        Self {
            policy: g.policy,
            retry_subset_size: g.retry_subset_size,
            retry_interval_ms: 5.0,
            batch_window_factor: g.batch_window_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceSection {
    /// HBM bytes per prefill reserved for prefix KVCache.
    pub prefix_cache_bytes: u64,
    pub retrieval_capacity: u32,
}

impl Default for InstanceSection {
    fn default() -> Self {
        Self {
            prefix_cache_bytes: 8 << 30,
            retrieval_capacity: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferModeName {
    BlockFree,
    BlockFixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub mode: TransferModeName,
    pub block_size: u64,
    pub bandwidth: f64,
    pub control_overhead_ms: f64,
    pub hop_conflict_prob: f64,
    pub conflict_penalty_ms: DelayDist,
    /// Send layer by layer as prefill layers finish.
    pub per_layer: bool,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self {
            mode: TransferModeName::BlockFree,
            block_size: 128 * 1024,
            bandwidth: 25e9,
            control_overhead_ms: 0.0045,
            hop_conflict_prob: 0.0,
            conflict_penalty_ms: DelayDist::Uniform { min: 100.0, max: 300.0 },
            per_layer: false,
        }
    }
}

impl TransferSection {
    pub fn transfer_mode(&self) -> TransferMode {
        match self.mode {
            TransferModeName::BlockFree => TransferMode::BlockFree,
            TransferModeName::BlockFixed => TransferMode::BlockFixed {
                block_size: self.block_size,
            },
        }
    }

    pub fn link(&self) -> LinkModel {
        LinkModel {
            bandwidth: self.bandwidth,
            control_overhead: self.control_overhead_ms * MS,
            hop_conflict_prob: self.hop_conflict_prob,
            conflict_penalty: self.conflict_penalty_ms.scaled(MS),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    /// Free containers beyond those the initial groups use.
    pub spare_containers: u32,
    pub report_delay_ms: DelayDist,
    pub collect_timeout_ms: f64,
    pub collect_retries: u32,
    pub init_ms: f64,
    pub connect_ms: DelayDist,
    pub connect_timeout_ms: f64,
    pub model_store: ModelStore,
    pub load_sfs_ms: RoleLoad,
    pub load_ssd_ms: RoleLoad,
    pub first_report_ms: f64,
    pub propagation_delay_ms: f64,
    pub health_interval_ms: f64,
    pub miss_threshold: u32,
    pub repair_ms: f64,
    pub restart_ms: f64,
}

impl Default for ControlSection {
    fn default() -> Self {
        Self {
            spare_containers: 2,
            report_delay_ms: DelayDist::Uniform { min: 500.0, max: 2000.0 },
            collect_timeout_ms: 30_000.0,
            collect_retries: 3,
            init_ms: 5_000.0,
            connect_ms: DelayDist::Uniform { min: 1000.0, max: 3000.0 },
            connect_timeout_ms: 30_000.0,
            model_store: ModelStore::Ssd,
            load_sfs_ms: RoleLoad {
                prefill: DelayDist::Uniform { min: 120_000.0, max: 240_000.0 },
                decode: DelayDist::Uniform { min: 150_000.0, max: 300_000.0 },
            },
            load_ssd_ms: RoleLoad {
                prefill: DelayDist::Uniform { min: 40_000.0, max: 80_000.0 },
                decode: DelayDist::Uniform { min: 50_000.0, max: 100_000.0 },
            },
            first_report_ms: 1_000.0,
            propagation_delay_ms: 500.0,
            health_interval_ms: 10_000.0,
            miss_threshold: 3,
            repair_ms: 600_000.0,
            restart_ms: 60_000.0,
        }
    }
}

impl ControlSection {
    pub fn timing(&self) -> ControlTiming {
        let role = |r: RoleLoad| RoleLoad {
            prefill: r.prefill.scaled(MS),
            decode: r.decode.scaled(MS),
        };
        ControlTiming {
            report_delay: self.report_delay_ms.scaled(MS),
            collect_timeout: self.collect_timeout_ms * MS,
            collect_retries: self.collect_retries,
            init_time: self.init_ms * MS,
            connect_time: self.connect_ms.scaled(MS),
            connect_timeout: self.connect_timeout_ms * MS,
            model_store: self.model_store,
            load_sfs: role(self.load_sfs_ms),
            load_ssd: role(self.load_ssd_ms),
            first_report: self.first_report_ms * MS,
            propagation_delay: self.propagation_delay_ms * MS,
            health_interval: self.health_interval_ms * MS,
            miss_threshold: self.miss_threshold,
            repair_time: self.repair_ms * MS,
            restart_time: self.restart_ms * MS,
        }
    }
}

/// A fault on a specific member: the `index`-th active instance of `role`
/// in `group` at time `at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub at: f64,
    pub group: String,
    pub role: Role,
    #[serde(default)]
    pub index: u32,
    pub level: FaultLevel,
}

/// `count` faults on randomly chosen active instances, `interval` seconds
/// apart starting at `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultDrill {
    pub count: u32,
    pub start: f64,
    pub interval: f64,
    pub level: FaultLevel,
}

/// Ratio adjustment of `group` to the given counts at time `at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSpec {
    pub at: f64,
    pub group: String,
    pub n_prefill: u32,
    pub n_decode: u32,
}

/// Sequential drain and re-setup of every group, starting at `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpgradeSpec {
    pub start: f64,
}

/// Monitor-driven ratio adjustment for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSpec {
    pub group: String,
    /// Seconds per observation window.
    pub window: f64,
    pub e2e_tolerance: f64,
    pub share_tolerance: f64,
    pub max_additions: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    /// Seconds of generated traffic.
    pub duration: f64,
    /// Extra simulated seconds after traffic stops. Defaults to the largest
    /// E2E timeout so every request reaches a terminal state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drain: Option<f64>,
    /// Seconds excluded from steady-state summaries.
    #[serde(default)]
    pub warmup: f64,
    /// Metrics bucket width, seconds.
    #[serde(default = "default_bucket")]
    pub bucket: f64,
    #[serde(default)]
    pub model: ModelConfig,
    pub scenarios: Vec<ScenarioConfig>,
    pub profiles: BTreeMap<String, ProfileConfig>,
    pub groups: Vec<GroupConfig>,
    pub traffic: TrafficConfig,
    #[serde(default)]
    pub gateway: GatewaySection,
    #[serde(default)]
    pub instance: InstanceSection,
    #[serde(default)]
    pub transfer: TransferSection,
    #[serde(default)]
    pub control: ControlSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub faults: Vec<FaultSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault_drill: Option<FaultDrill>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scaling: Vec<ScalingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upgrade: Option<UpgradeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitor: Option<MonitorSpec>,
}

fn default_bucket() -> f64 {
    10.0
}

/// Everything the simulator needs, in seconds and resolved ids.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub workload: Workload,
    pub trace: TrafficTrace,
    /// Indexed by `ScenarioId`.
    pub profiles: Vec<Option<PerfProfile>>,
    pub groups: Vec<GroupSpec>,
    pub shapes: BTreeMap<String, ClusterShape>,
    pub gateway: GatewayConfig,
    pub prefill_mode: PrefillMode,
    pub link: LinkModel,
    pub transfer_mode: TransferMode,
    pub per_layer: bool,
    pub timing: ControlTiming,
    pub containers: u32,
    pub end: f64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn group(&self, name: &str) -> Option<&GroupConfig> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut GroupConfig> {
        self.groups.iter_mut().find(|g| g.name == name)
    }

    /// Multiplies every traffic rate.
    pub fn scale_traffic(&mut self, factor: f64) {
        for slot in &mut self.traffic.slots {
            for r in slot.rates.values_mut() {
                *r *= factor;
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.resolve().map(|_| ())
    }

    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(invalid("duration must be positive"));
        }
        if !(self.bucket > 0.0 && self.bucket.is_finite()) {
            return Err(invalid("bucket must be positive"));
        }
        if !(self.warmup >= 0.0 && self.warmup < self.duration) {
            return Err(invalid("warmup must be in [0, duration)"));
        }
        if i64::try_from(self.seed).is_err() {
            return Err(invalid("seed must fit in a signed 64-bit integer"));
        }
        let m = &self.model;
        if m.hidden_size == 0 || m.num_layers == 0 || m.bytes_per_elem == 0 || m.tp_degree == 0 {
            return Err(invalid("model dimensions must be positive"));
        }

        let specs = self
            .scenarios
            .iter()
            .map(|s| ScenarioSpec {
                name: s.name.clone(),
                prompt_len: s.prompt_len.clone(),
                prefixes: s.prefixes.clone(),
                output_len: s.output_len.clone(),
                ttft_slo: s.ttft_slo_ms * MS,
                e2e_timeout: s.e2e_timeout_ms * MS,
            })
            .collect();
        let workload = Workload::new(specs).map_err(|e| invalid(format!("scenarios: {e}")))?;

        let gateway = GatewayConfig {
            policy: self.gateway.policy,
            retry_subset_size: self.gateway.retry_subset_size,
            retry_interval: self.gateway.retry_interval_ms * MS,
            batch_window_factor: self.gateway.batch_window_factor,
        };
        gateway.validate().map_err(|e| invalid(e.to_string()))?;

        let link = self.transfer.link();
        link.validate().map_err(|e| invalid(format!("transfer: {e}")))?;
        let transfer_mode = self.transfer.transfer_mode();
        if transfer_mode.messages(1).is_err() {
            return Err(invalid("transfer: block_size must be positive"));
        }

        let timing = self.control.timing();
        timing.validate().map_err(|e| invalid(format!("control: {e}")))?;

        // Profiles, one per scenario.
        let mut profiles = Vec::with_capacity(self.scenarios.len());
        for s in &self.scenarios {
            let p = self
                .profiles
                .get(&s.name)
                .ok_or_else(|| invalid(format!("scenario {} has no profile", s.name)))?;
            let g = p.mean_generated_tokens.unwrap_or_else(|| s.output_len.mean());
            let xi = match p.transfer_ms {
                Some(ms) => ms * MS,
                None => {
                    let bytes = m
                        .kv_bytes(s.prompt_len.mean().round() as u32)
                        .ok_or_else(|| invalid(format!("scenario {}: KVCache size overflow", s.name)))?;
                    let share = bytes.div_ceil(u64::from(m.tp_degree));
                    link.base_time(share, transfer_mode, 1)
                        .map_err(|e| invalid(format!("scenario {}: {e}", s.name)))?
                }
            };
            let profile = PerfProfile::new(p.ttft_ms.scaled(MS), p.tpot_ms.scaled(MS), p.prefix_benefit, g, xi)
                .map_err(|e| invalid(format!("profile {}: {e}", s.name)))?;
            profiles.push(Some(profile));
        }
        if let Some(extra) = self.profiles.keys().find(|k| workload.scenario_id(k).is_none()) {
            return Err(invalid(format!("profile {extra} names no scenario")));
        }

        // Groups.
        let mut names = BTreeSet::new();
        let mut mapped = BTreeSet::new();
        let mut groups = Vec::new();
        let mut shapes = BTreeMap::new();
        let mut used = 0u32;
        for g in &self.groups {
            if !names.insert(g.name.as_str()) {
                return Err(invalid(format!("group {} defined twice", g.name)));
            }
            g.shape()
                .validate()
                .map_err(|e| invalid(format!("group {}: {e}", g.name)))?;
            if g.scenarios.is_empty() {
                return Err(invalid(format!("group {} serves no scenario", g.name)));
            }
            for s in &g.scenarios {
                let sid = workload
                    .scenario_id(s)
                    .ok_or_else(|| invalid(format!("group {} references unknown scenario {s}", g.name)))?;
                let p = profiles[sid.0 as usize].as_ref().expect("built above");
                for (what, table, b) in [("ttft", p.ttft(), g.batch_prefill), ("tpot", p.tpot(), g.batch_decode)] {
                    if !(table.covers(1) && table.covers(b)) {
                        return Err(invalid(format!(
                            "group {}: {what} table for scenario {s} does not cover batch sizes 1..={b}",
                            g.name
                        )));
                    }
                }
                mapped.insert(s.as_str());
            }
            used += g.n_prefill + g.n_decode;
            shapes.insert(g.name.clone(), g.shape());
            groups.push(GroupSpec {
                name: g.name.clone(),
                service: g.service.clone(),
                scenarios: g.scenarios.iter().cloned().collect(),
                n_prefill: g.n_prefill,
                n_decode: g.n_decode,
            });
        }
        if let Some(s) = self.scenarios.iter().find(|s| !mapped.contains(s.name.as_str())) {
            return Err(invalid(format!("scenario {} is not mapped to any group", s.name)));
        }

        // Traffic.
        let trace = TrafficTrace {
            slots: self.traffic.slots.clone(),
            end: self.duration,
        };
        trace.validate().map_err(|e| invalid(format!("traffic: {e}")))?;
        for slot in &trace.slots {
            if let Some(name) = slot.rates.keys().find(|n| workload.scenario_id(n).is_none()) {
                return Err(invalid(format!("traffic references unknown scenario {name}")));
            }
        }

        // Events.
        for f in &self.faults {
            if !names.contains(f.group.as_str()) {
                return Err(invalid(format!("fault references unknown group {}", f.group)));
            }
        }
        if let Some(d) = &self.fault_drill {
            if !(d.interval > 0.0) || !(d.start >= 0.0) {
                return Err(invalid("fault_drill: start must be >= 0 and interval > 0"));
            }
        }
        for s in &self.scaling {
            if !names.contains(s.group.as_str()) {
                return Err(invalid(format!("scaling references unknown group {}", s.group)));
            }
            if s.n_prefill == 0 || s.n_decode == 0 {
                return Err(invalid(format!("scaling of group {} needs at least 1P and 1D", s.group)));
            }
        }
        if let Some(mon) = &self.monitor {
            if !names.contains(mon.group.as_str()) {
                return Err(invalid(format!("monitor references unknown group {}", mon.group)));
            }
            if !(mon.window > 0.0) {
                return Err(invalid("monitor window must be positive"));
            }
        }

        let max_e2e = workload.scenarios().iter().map(|s| s.e2e_timeout).fold(0.0, f64::max);
        let drain = self.drain.unwrap_or(max_e2e);
        if !(drain >= 0.0 && drain.is_finite()) {
            return Err(invalid("drain must be non-negative"));
        }

        let prefill_mode = match gateway.policy {
            GatewayPolicy::Baseline => PrefillMode::LocalQueue,
            GatewayPolicy::OnDemand => PrefillMode::Reject,
        };
        Ok(Resolved {
            workload,
            trace,
            profiles,
            groups,
            shapes,
            gateway,
            prefill_mode,
            link,
            transfer_mode,
            per_layer: self.transfer.per_layer,
            timing,
            containers: used + self.control.spare_containers,
            end: self.duration + drain,
        })
    }
}

impl Resolved {
    pub fn profile(&self, scenario: ScenarioId) -> &PerfProfile {
        self.profiles[scenario.0 as usize].as_ref().expect("every scenario has a profile")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
name = "sample"
seed = 7
duration = 60.0

[[scenarios]]
name = "chat"
prompt_len = [[1024, 1.0]]
output_len = [[32, 1.0]]
ttft_slo_ms = 2000.0
e2e_timeout_ms = 20000.0
prefixes = [{ name = "sys", len = 512 }]

[profiles.chat]
ttft_ms = [[1, 400.0], [4, 800.0]]
tpot_ms = [[1, 20.0], [16, 40.0]]
prefix_benefit = 0.6

[[groups]]
name = "g0"
scenarios = ["chat"]
n_prefill = 2
n_decode = 2
batch_prefill = 4
batch_decode = 16

[traffic]
slots = [{ start = 0.0, rates = { chat = 3.0 } }]
"#;

    #[test]
    fn parse_and_resolve() {
        let cfg = RunConfig::from_toml(SAMPLE).unwrap();
        let r = cfg.resolve().unwrap();
        let p = r.profile(ScenarioId(0));
        assert!((p.ttft().lookup(1).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(p.mean_generated_tokens(), 32.0);
        assert!(p.transfer_time() > 0.0);
        assert_eq!(r.end, 80.0);
        assert_eq!(r.prefill_mode, PrefillMode::Reject);
        assert_eq!(r.containers, 6);
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = RunConfig::from_toml(SAMPLE).unwrap();
        let text = cfg.to_toml().unwrap();
        let again = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(text, again.to_toml().unwrap());
    }

    #[test]
    fn unmapped_scenario_named() {
        let mut cfg = RunConfig::from_toml(SAMPLE).unwrap();
        cfg.groups[0].scenarios = vec!["other".into()];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("unknown scenario other"), "{err}");
        let mut cfg = RunConfig::from_toml(SAMPLE).unwrap();
        cfg.groups.clear();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("chat is not mapped"), "{err}");
    }

    #[test]
    fn untabulated_batch_named() {
        let mut cfg = RunConfig::from_toml(SAMPLE).unwrap();
        cfg.groups[0].batch_prefill = 8;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("ttft table") && err.contains("1..=8"), "{err}");
    }

    #[test]
    fn missing_profile_named() {
        let mut cfg = RunConfig::from_toml(SAMPLE).unwrap();
        cfg.profiles.clear();
        assert!(cfg.validate().unwrap_err().to_string().contains("chat has no profile"));
    }

    #[test]
    fn unknown_field_rejected() {
        let text = SAMPLE.replace("seed = 7", "seed = 7\nbogus = 1");
        assert!(RunConfig::from_toml(&text).is_err());
    }
}
