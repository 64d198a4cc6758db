//! Event-driven simulation of a whole P/D cluster: gateway, instances,
//! KVCache transfers and the control plane.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, Resolved, RunConfig};
use crate::control_plane::{
    monitor_decision, AdjustPolicy, Alert, ControlError, FaultEvent, FaultLevel, GroupState, GroupView, HealthStatus,
    MemberState, MonitorSample, Outcome, PendingWorkflow, PlanStep, RecoveryStart, Registry, Role, Transcript,
    WorkflowId, WorkflowKind,
};
use crate::gateway::{GatewayCounters, GatewayPolicy, GatewayState, RouteOutcome};
use crate::instance::{
    Admission, DecodeInstance, DecodeSlot, InstanceError, InstanceId, Offer, PrefillInstance, PrefillItem, PrefillMode,
};
use crate::metrics::{MetricsFrame, RequestOutcome, Sample, ScenarioStats, Summary, TransferRecord};
use crate::perf_model::{cluster_throughput, ClusterShape, ThroughputEstimate};
use crate::sim::{Engine, EventHandle, EventLog, RngStreams, RunStats, Scheduled, SimError, SimRng};
use crate::transfer::{layered_completion, request_xi, utilization, TransferError};
use crate::workload::{generate_trace, Phase, Request, RequestId, RequestStatus, ScenarioId, WorkloadError};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error("KVCache size overflows for a {0}-token prompt")]
    KvOverflow(u32),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions {
    /// Keep a per-event debug log.
    pub event_log: bool,
}

/// Seconds between checks on draining instances.
const DRAIN_POLL: f64 = 0.5;

#[derive(Debug, Clone)]
enum Ev {
    Arrival(usize),
    TtftDeadline(usize),
    E2eDeadline(usize),
    GatewayRound(ScenarioId),
    BatchWindow(InstanceId, u64),
    PrefillDone(InstanceId, u64),
    TransferDone {
        req: usize,
        prefill: InstanceId,
        decode: InstanceId,
    },
    DecodeIter(InstanceId, u64),
    HealthTick,
    FaultAt(usize),
    Drill,
    WorkflowDone(WorkflowId),
    MetaPropagated(GroupView),
    Repair,
    Scaling(usize),
    Upgrade,
    DrainCheck,
    MonitorTick,
    Sample,
}

impl Ev {
    fn kind(&self) -> &'static str {
        match self {
            Ev::Arrival(_) => "arrival",
            Ev::TtftDeadline(_) => "ttft_deadline",
            Ev::E2eDeadline(_) => "e2e_deadline",
            Ev::GatewayRound(_) => "gateway_round",
            Ev::BatchWindow(..) => "batch_window",
            Ev::PrefillDone(..) => "prefill_done",
            Ev::TransferDone { .. } => "transfer_done",
            Ev::DecodeIter(..) => "decode_iteration",
            Ev::HealthTick => "health_tick",
            Ev::FaultAt(_) | Ev::Drill => "fault",
            Ev::WorkflowDone(_) => "workflow_done",
            Ev::MetaPropagated(_) => "meta_propagated",
            Ev::Repair => "repair",
            Ev::Scaling(_) => "scaling",
            Ev::Upgrade => "upgrade",
            Ev::DrainCheck => "drain_check",
            Ev::MonitorTick => "monitor",
            Ev::Sample => "sample",
        }
    }
}

/// Where a live request currently is.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Stage {
    Waiting,
    Queued(InstanceId),
    Forming(InstanceId),
    Prefilling(InstanceId),
    Handoff(InstanceId),
    Transferring(InstanceId, InstanceId),
    Decoding(InstanceId),
    Terminal,
}

#[derive(Debug, Clone)]
struct Track {
    stage: Stage,
    group: Option<usize>,
    transfer: Option<f64>,
    utilization: Option<f64>,
    bytes: u64,
    conflicts: u32,
}

#[derive(Debug)]
struct PrefillNode {
    inst: PrefillInstance,
    alive: bool,
    epoch: u64,
    window: Option<EventHandle>,
    sending: u32,
}

#[derive(Debug)]
struct DecodeNode {
    inst: DecodeInstance,
    alive: bool,
    epoch: u64,
    receiving: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyticRow {
    pub group: String,
    pub shape: ClusterShape,
    /// Mean offered load, requests per second.
    pub traffic: f64,
    /// Only for single-scenario groups.
    pub estimate: Option<ThroughputEstimate>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FaultStats {
    pub injected: u32,
    pub detected: u32,
    /// Requests failed because their instance faulted.
    pub failed_requests: u64,
    /// Containers added by each completed substitution.
    pub recovery_additions: Vec<u32>,
    pub restarts: u32,
    pub max_parked: usize,
    /// Seconds from injection to detection.
    pub detection_delays: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct UpgradeStep {
    pub group: String,
    pub drain_started: f64,
    pub removed_at: Option<f64>,
    pub ready_at: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonitorRecord {
    pub at: f64,
    pub sample: MonitorSample,
    pub added: Option<Role>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceReport {
    pub id: u32,
    pub role: Role,
    pub group: String,
    pub busy_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub policy: GatewayPolicy,
    pub end: f64,
    pub requests: u64,
    pub summary: Summary,
    pub scenarios: Vec<ScenarioStats>,
    pub analytic: Vec<AnalyticRow>,
    pub gateway: GatewayCounters,
    /// Number of offers a request saw before acceptance, by count.
    pub attempts_histogram: BTreeMap<usize, u64>,
    pub faults: FaultStats,
    pub upgrade: Vec<UpgradeStep>,
    pub scaling: Vec<(f64, String, Vec<PlanStep>)>,
    pub monitor: Vec<MonitorRecord>,
    pub transcripts: Vec<Transcript>,
    pub alerts: Vec<Alert>,
    pub instances: Vec<InstanceReport>,
    /// Requests still in flight at the end of the run.
    pub unfinished: u64,
    /// Routes to an instance after its removal had propagated.
    pub late_routes: u64,
    pub violations: Vec<String>,
    pub engine: RunStats,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub frame: MetricsFrame,
    pub report: RunReport,
    pub outcomes: Vec<RequestOutcome>,
    pub transfers: Vec<TransferRecord>,
    pub samples: Vec<Sample>,
    pub events: EventLog,
}

impl RunOutput {
    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(&self.report).expect("report serializes")
    }
}

/// Simulates one configuration to completion.
pub fn run(cfg: &RunConfig, opts: SimOptions) -> Result<RunOutput, SimulationError> {
    let res = cfg.resolve()?;
    let requests = generate_trace(&res.workload, &res.trace, cfg.seed)?;
    let mut cluster = Cluster::new(cfg, res, requests, opts)?;
    let stats = cluster.simulate()?;
    Ok(cluster.finish(stats))
}

struct Cluster<'a> {
    cfg: &'a RunConfig,
    res: Resolved,
    requests: Vec<Request>,
    tracks: Vec<Track>,
    group_names: Vec<String>,
    prefills: BTreeMap<InstanceId, PrefillNode>,
    decodes: BTreeMap<InstanceId, DecodeNode>,
    views: BTreeMap<String, GroupView>,
    candidates: BTreeMap<ScenarioId, Vec<InstanceId>>,
    handoffs: BTreeMap<String, VecDeque<usize>>,
    gateway: GatewayState,
    rounds_pending: BTreeSet<ScenarioId>,
    registry: Registry,
    rng_transfer: SimRng,
    rng_control: SimRng,
    rng_faults: SimRng,
    end: f64,
    now: f64,
    seq: u64,

    faulted: BTreeMap<InstanceId, (FaultLevel, f64)>,
    detected: BTreeSet<InstanceId>,
    fault_stats: FaultStats,
    drill_left: u32,
    scaling_queue: VecDeque<(String, PlanStep)>,
    scaling_log: Vec<(f64, String, Vec<PlanStep>)>,
    upgrade_queue: VecDeque<String>,
    upgrade_current: Option<String>,
    upgrade_awaiting_setup: bool,
    upgrade_log: Vec<UpgradeStep>,
    drain_check_pending: bool,
    /// Last time each group's view was published.
    last_publish: BTreeMap<String, f64>,
    monitor_prev: Option<MonitorSample>,
    monitor_added: u32,
    monitor_log: Vec<MonitorRecord>,

    outcomes: Vec<RequestOutcome>,
    transfers: Vec<TransferRecord>,
    samples: Vec<Sample>,
    cache_hits: u64,
    cache_lookups: u64,
    late_routes: u64,
    violations: Vec<String>,
    log: EventLog,
}

impl<'a> Cluster<'a> {
    fn new(cfg: &'a RunConfig, res: Resolved, requests: Vec<Request>, opts: SimOptions) -> Result<Self, SimulationError> {
        let streams = RngStreams::new(cfg.seed);
        let mut registry = Registry::new(res.timing, res.containers, cfg.model.tp_degree)?;
        let group_names: Vec<String> = res.groups.iter().map(|g| g.name.clone()).collect();
        let tracks = requests
            .iter()
            .map(|_| Track {
                stage: Stage::Waiting,
                group: None,
                transfer: None,
                utilization: None,
                bytes: 0,
                conflicts: 0,
            })
            .collect();
        let end = {
            let n = (res.end / cfg.bucket).ceil().max(1.0);
            n * cfg.bucket
        };
        let mut views = BTreeMap::new();
        for spec in &res.groups {
            let view = registry.bootstrap_group(spec, 0.0)?;
            views.insert(spec.name.clone(), view);
        }
        let mut c = Self {
            cfg,
            gateway: GatewayState::new(res.gateway),
            res,
            requests,
            tracks,
            group_names,
            prefills: BTreeMap::new(),
            decodes: BTreeMap::new(),
            views,
            candidates: BTreeMap::new(),
            handoffs: BTreeMap::new(),
            rounds_pending: BTreeSet::new(),
            registry,
            rng_transfer: streams.stream("transfer"),
            rng_control: streams.stream("control"),
            rng_faults: streams.stream("faults"),
            end,
            now: 0.0,
            seq: 0,
            faulted: BTreeMap::new(),
            detected: BTreeSet::new(),
            fault_stats: FaultStats::default(),
            drill_left: cfg.fault_drill.as_ref().map_or(0, |d| d.count),
            scaling_queue: VecDeque::new(),
            scaling_log: Vec::new(),
            upgrade_queue: VecDeque::new(),
            upgrade_current: None,
            upgrade_awaiting_setup: false,
            upgrade_log: Vec::new(),
            drain_check_pending: false,
            last_publish: BTreeMap::new(),
            monitor_prev: None,
            monitor_added: 0,
            monitor_log: Vec::new(),
            outcomes: Vec::new(),
            transfers: Vec::new(),
            samples: Vec::new(),
            cache_hits: 0,
            cache_lookups: 0,
            late_routes: 0,
            violations: Vec::new(),
            log: EventLog::new(opts.event_log),
        };
        let names = c.group_names.clone();
        for g in &names {
            let view = c.views[g].clone();
            for &p in &view.prefills {
                c.add_prefill(p, g);
            }
            for &d in &view.decodes {
                c.add_decode(d, g);
            }
        }
        c.rebuild_candidates();
        Ok(c)
    }

    fn add_prefill(&mut self, id: InstanceId, group: &str) {
        let b = self.res.shapes.get(group).map_or(1, |s| s.batch_prefill);
        let inst = PrefillInstance::new(id, group, b, self.res.prefill_mode, self.cfg.instance.prefix_cache_bytes);
        self.prefills.insert(
            id,
            PrefillNode {
                inst,
                alive: true,
                epoch: 0,
                window: None,
                sending: 0,
            },
        );
    }

    fn add_decode(&mut self, id: InstanceId, group: &str) {
        let b = self.res.shapes.get(group).map_or(1, |s| s.batch_decode);
        let inst = DecodeInstance::new(id, group, b, self.cfg.instance.retrieval_capacity);
        self.decodes.insert(
            id,
            DecodeNode {
                inst,
                alive: true,
                epoch: 0,
                receiving: 0,
            },
        );
    }

    fn rebuild_candidates(&mut self) {
        self.candidates.clear();
        for view in self.views.values() {
            for name in &view.scenarios {
                if let Some(sid) = self.res.workload.scenario_id(name) {
                    let list = self.candidates.entry(sid).or_default();
                    // Instances the gateway cannot even connect to are skipped.
                    list.extend(view.prefills.iter().filter(|p| self.prefills.contains_key(p)));
                }
            }
        }
        for list in self.candidates.values_mut() {
            list.sort();
            list.dedup();
        }
    }

    fn group_index(&self, name: &str) -> Option<usize> {
        self.group_names.iter().position(|g| g == name)
    }

    fn schedule(&mut self, eng: &mut Engine<Ev>, at: f64, ev: Ev) -> Result<Option<EventHandle>, SimulationError> {
        if at > self.end {
            return Ok(None);
        }
        Ok(Some(eng.schedule(at.max(self.now), ev)?))
    }

    fn simulate(&mut self) -> Result<RunStats, SimulationError> {
        let mut eng: Engine<Ev> = Engine::new();
        for i in 0..self.requests.len() {
            let at = self.requests[i].arrival;
            self.schedule(&mut eng, at, Ev::Arrival(i))?;
        }
        let interval = self.res.timing.health_interval;
        self.schedule(&mut eng, interval, Ev::HealthTick)?;
        for (i, f) in self.cfg.faults.iter().enumerate() {
            self.schedule(&mut eng, f.at, Ev::FaultAt(i))?;
        }
        if let Some(d) = &self.cfg.fault_drill {
            if d.count > 0 {
                let start = d.start;
                self.schedule(&mut eng, start, Ev::Drill)?;
            }
        }
        for (i, s) in self.cfg.scaling.iter().enumerate() {
            self.schedule(&mut eng, s.at, Ev::Scaling(i))?;
        }
        if let Some(u) = &self.cfg.upgrade {
            let start = u.start;
            self.schedule(&mut eng, start, Ev::Upgrade)?;
        }
        if let Some(m) = &self.cfg.monitor {
            let w = m.window;
            self.schedule(&mut eng, w, Ev::MonitorTick)?;
        }
        let bucket = self.cfg.bucket;
        self.schedule(&mut eng, bucket, Ev::Sample)?;

        while let Some(item) = eng.next_event(self.end) {
            self.now = item.fire_time;
            self.seq = item.sequence;
            self.handle(&mut eng, item)?;
        }
        eng.advance_to(self.end)?;
        Ok(eng.stats())
    }

    fn handle(&mut self, eng: &mut Engine<Ev>, item: Scheduled<Ev>) -> Result<(), SimulationError> {
        let Scheduled { event, .. } = item;
        if self.log.enabled() {
            let detail = format!("{event:?}");
            self.log.push(self.now, self.seq, event.kind(), || detail);
        }
        match event {
            Ev::Arrival(i) => self.on_arrival(eng, i),
            Ev::TtftDeadline(i) => {
                if self.tracks[i].stage == Stage::Waiting {
                    self.gateway.record_early_termination();
                    self.terminate(eng, i, RequestStatus::TimeoutTtft)?;
                }
                Ok(())
            }
            Ev::E2eDeadline(i) => {
                if !self.requests[i].is_terminal() {
                    self.terminate(eng, i, RequestStatus::TimeoutE2e)?;
                }
                Ok(())
            }
            Ev::GatewayRound(s) => self.on_round(eng, s),
            Ev::BatchWindow(p, epoch) => {
                let ok = self
                    .prefills
                    .get_mut(&p)
                    .filter(|n| n.alive && n.epoch == epoch)
                    .map(|n| n.window = None)
                    .is_some();
                if ok {
                    self.launch(eng, p)?;
                }
                Ok(())
            }
            Ev::PrefillDone(p, epoch) => self.on_prefill_done(eng, p, epoch),
            Ev::TransferDone { req, prefill, decode } => self.on_transfer_done(eng, req, prefill, decode),
            Ev::DecodeIter(d, epoch) => self.on_decode_iter(eng, d, epoch),
            Ev::HealthTick => self.on_health_tick(eng),
            Ev::FaultAt(i) => self.on_fault_spec(i),
            Ev::Drill => self.on_drill(eng),
            Ev::WorkflowDone(id) => self.on_workflow_done(eng, id),
            Ev::MetaPropagated(view) => self.on_meta(eng, view),
            Ev::Repair => self.on_repair(eng),
            Ev::Scaling(i) => self.on_scaling(eng, i),
            Ev::Upgrade => {
                self.upgrade_queue = self.group_names.iter().cloned().collect();
                self.upgrade_next(eng)
            }
            Ev::DrainCheck => {
                self.drain_check_pending = false;
                self.on_drain_check(eng)
            }
            Ev::MonitorTick => self.on_monitor(eng),
            Ev::Sample => self.on_sample(eng),
        }
    }

    // ---- request path ----

    fn on_arrival(&mut self, eng: &mut Engine<Ev>, i: usize) -> Result<(), SimulationError> {
        let (sid, arrival) = (self.requests[i].scenario, self.requests[i].arrival);
        let spec = self.res.workload.scenario(sid);
        let (slo, e2e) = (spec.ttft_slo, spec.e2e_timeout);
        self.schedule(eng, arrival + slo, Ev::TtftDeadline(i))?;
        self.schedule(eng, arrival + e2e, Ev::E2eDeadline(i))?;
        self.gateway.enqueue(sid, RequestId(i as u64));
        self.kick(eng, sid, self.now)
    }

    fn kick(&mut self, eng: &mut Engine<Ev>, sid: ScenarioId, at: f64) -> Result<(), SimulationError> {
        if self.rounds_pending.insert(sid) && self.schedule(eng, at, Ev::GatewayRound(sid))?.is_none() {
            self.rounds_pending.remove(&sid);
        }
        Ok(())
    }

    fn item(&self, i: usize) -> Result<PrefillItem, SimulationError> {
        let r = &self.requests[i];
        let prefix = match r.prefix {
            Some(p) => {
                let bytes = self.cfg.model.kv_bytes(r.prefix_len).ok_or(SimulationError::KvOverflow(r.prefix_len))?;
                Some((p, r.prefix_len, bytes))
            }
            None => None,
        };
        Ok(PrefillItem {
            id: r.id,
            scenario: r.scenario,
            prefix,
        })
    }

    fn on_round(&mut self, eng: &mut Engine<Ev>, sid: ScenarioId) -> Result<(), SimulationError> {
        self.rounds_pending.remove(&sid);
        let now = self.now;
        let mut retry = false;
        while let Some(head) = self.gateway.head(sid) {
            let i = head.0 as usize;
            let cands = self.candidates.get(&sid).cloned().unwrap_or_default();
            let item = self.item(i)?;
            match self.gateway.policy() {
                GatewayPolicy::Baseline => {
                    let Some(p) = self.gateway.baseline_target(&cands) else {
                        retry = true;
                        break;
                    };
                    self.gateway.pop_head(sid);
                    self.gateway.record_baseline(head, p, now);
                    let node = self.prefills.get_mut(&p).expect("candidates have nodes");
                    node.inst.offer(item);
                    self.on_accept(i, p, Stage::Queued(p))?;
                    self.maybe_launch(eng, p)?;
                }
                GatewayPolicy::OnDemand => {
                    let out = {
                        let Cluster { gateway, prefills, .. } = self;
                        gateway.route_round(head, sid, &cands, now, |p| offer_to(prefills, p, item))
                    };
                    match out {
                        RouteOutcome::Assigned(p) => {
                            self.gateway.pop_head(sid);
                            self.on_accept(i, p, Stage::Forming(p))?;
                            self.fill_batch(sid, p)?;
                            self.maybe_launch(eng, p)?;
                        }
                        RouteOutcome::Retry | RouteOutcome::NoCandidates => {
                            retry = true;
                            break;
                        }
                    }
                }
            }
        }
        if retry {
            let at = now + self.res.gateway.retry_interval;
            self.kick(eng, sid, at)?;
        }
        Ok(())
    }

    /// Offers further waiting requests of the same scenario to a prefill that
    /// just accepted, until its batch is full or one is refused.
    fn fill_batch(&mut self, sid: ScenarioId, p: InstanceId) -> Result<(), SimulationError> {
        while let Some(head) = self.gateway.head(sid) {
            if self.prefills[&p].inst.free_slots() == 0 {
                break;
            }
            let i = head.0 as usize;
            let item = self.item(i)?;
            let now = self.now;
            let taken = {
                let Cluster { gateway, prefills, .. } = self;
                gateway.offer_fill(head, p, now, |p| offer_to(prefills, p, item))
            };
            if !taken {
                break;
            }
            self.gateway.pop_head(sid);
            self.on_accept(i, p, Stage::Forming(p))?;
        }
        Ok(())
    }

    fn on_accept(&mut self, i: usize, p: InstanceId, stage: Stage) -> Result<(), SimulationError> {
        let now = self.now;
        self.requests[i].timestamps.set(Phase::Accepted, now)?;
        let group = self.prefills[&p].inst.group.clone();
        self.tracks[i].stage = stage;
        self.tracks[i].group = self.group_index(&group);
        if let Err(e) = self.gateway.sse_open(RequestId(i as u64), p) {
            self.violations.push(format!("request {i}: {e}"));
        }
        self.check_route(p);
        let node = &self.prefills[&p];
        if node.inst.mode() == PrefillMode::Reject && (node.inst.busy() || !node.inst.local_queue().is_empty()) {
            self.violations.push(format!("request {i} accepted by prefill {} while it was not idle", p.0));
        }
        Ok(())
    }

    fn check_route(&mut self, instance: InstanceId) {
        let prop = self.res.timing.propagation_delay;
        if let Some((_, m)) = self.registry.locate(instance) {
            if let Some(removed) = m.removed_at {
                if self.now > removed + prop + 1e-9 {
                    self.late_routes += 1;
                    self.violations.push(format!(
                        "routed to instance {} at {} after removal at {}",
                        instance.0, self.now, removed
                    ));
                }
            }
        }
    }

    fn maybe_launch(&mut self, eng: &mut Engine<Ev>, p: InstanceId) -> Result<(), SimulationError> {
        let factor = self.res.gateway.batch_window_factor;
        let Some(node) = self.prefills.get_mut(&p) else { return Ok(()) };
        if !node.alive || node.inst.busy() {
            return Ok(());
        }
        if node.inst.mode() == PrefillMode::LocalQueue {
            for id in node.inst.pull_from_queue() {
                self.tracks[id.0 as usize].stage = Stage::Forming(p);
            }
        }
        let node = self.prefills.get_mut(&p).expect("present");
        let Some(first) = node.inst.forming().first() else { return Ok(()) };
        // Slots still held by outbound transfers do not count toward a full
        // batch; the window bounds the wait for them.
        if node.inst.forming().len() >= node.inst.max_batch() as usize || factor == 0.0 {
            return self.launch(eng, p);
        }
        if node.window.is_none() {
            let ttft1 = self.res.profile(first.scenario).ttft().lookup(1).unwrap_or(0.0);
            let (at, epoch) = (self.now + factor * ttft1, node.epoch);
            let h = self.schedule(eng, at, Ev::BatchWindow(p, epoch))?;
            if let Some(node) = self.prefills.get_mut(&p) {
                node.window = h;
            }
        }
        Ok(())
    }

    fn launch(&mut self, eng: &mut Engine<Ev>, p: InstanceId) -> Result<(), SimulationError> {
        loop {
            let Some(node) = self.prefills.get_mut(&p) else { return Ok(()) };
            if !node.alive || node.inst.busy() {
                return Ok(());
            }
            if node.inst.mode() != PrefillMode::LocalQueue {
                break;
            }
            for id in node.inst.pull_from_queue() {
                self.tracks[id.0 as usize].stage = Stage::Forming(p);
            }
            // Requests that sat in the local queue past their TTFT deadline
            // are dropped instead of prefilled.
            let now = self.now;
            let expired: Vec<usize> = self.prefills[&p]
                .inst
                .forming()
                .iter()
                .map(|it| it.id.0 as usize)
                .filter(|&i| {
                    let r = &self.requests[i];
                    now - r.arrival > self.res.workload.scenario(r.scenario).ttft_slo
                })
                .collect();
            if expired.is_empty() {
                break;
            }
            for i in expired {
                self.terminate(eng, i, RequestStatus::TimeoutTtft)?;
            }
        }
        let node = self.prefills.get_mut(&p).expect("present");
        if let Some(h) = node.window.take() {
            eng.cancel(h);
        }
        if node.inst.forming().is_empty() {
            return Ok(());
        }
        let lookups = node.inst.forming().iter().filter(|i| i.prefix.is_some()).count() as u64;
        let batch = node.inst.launch(self.now, &self.res.profiles)?;
        let epoch = node.epoch;
        self.cache_lookups += lookups;
        self.cache_hits += u64::from(batch.hits);
        for id in &batch.members {
            let i = id.0 as usize;
            self.tracks[i].stage = Stage::Prefilling(p);
            self.requests[i].timestamps.set(Phase::PrefillStart, self.now)?;
            self.requests[i].advance(RequestStatus::Prefilling)?;
        }
        self.schedule(eng, batch.completes_at, Ev::PrefillDone(p, epoch))?;
        Ok(())
    }

    fn on_prefill_done(&mut self, eng: &mut Engine<Ev>, p: InstanceId, epoch: u64) -> Result<(), SimulationError> {
        let Some(node) = self.prefills.get_mut(&p) else { return Ok(()) };
        if !node.alive || node.epoch != epoch {
            return Ok(());
        }
        let members = node.inst.complete_batch(self.now)?;
        let group = node.inst.group.clone();
        for id in members {
            let i = id.0 as usize;
            if self.requests[i].is_terminal() {
                let node = self.prefills.get_mut(&p).expect("present");
                if node.inst.holds(id) {
                    node.inst.release(id)?;
                }
                continue;
            }
            self.requests[i].timestamps.set(Phase::PrefillEnd, self.now)?;
            self.tracks[i].stage = Stage::Handoff(p);
            self.requests[i].advance(RequestStatus::Transferring)?;
            self.handoffs.entry(group.clone()).or_default().push_back(i);
        }
        self.dispatch_handoffs(eng, &group)?;
        self.maybe_launch(eng, p)
    }

    /// Decodes eligible to receive a handoff from `group`: the propagated view,
    /// or while the group drains, its still-live draining decodes.
    fn handoff_targets(&self, group: &str) -> Vec<InstanceId> {
        let from_view: Vec<InstanceId> = self
            .views
            .get(group)
            .map(|v| v.decodes.iter().copied().filter(|d| self.decodes.contains_key(d)).collect())
            .unwrap_or_default();
        if !from_view.is_empty() {
            return from_view;
        }
        self.decodes
            .iter()
            .filter(|(_, n)| n.inst.group == group)
            .map(|(&d, _)| d)
            .collect()
    }

    fn dispatch_handoffs(&mut self, eng: &mut Engine<Ev>, group: &str) -> Result<(), SimulationError> {
        if self.handoffs.get(group).is_none_or(|q| q.is_empty()) {
            return Ok(());
        }
        let targets = self.handoff_targets(group);
        while let Some(&i) = self.handoffs.get(group).and_then(|q| q.front()) {
            let best = targets
                .iter()
                .filter_map(|d| self.decodes.get(d).map(|n| (d, n)))
                .filter(|(_, n)| n.alive && n.inst.has_room())
                .min_by_key(|(d, n)| (n.inst.load(), **d))
                .map(|(d, _)| *d);
            let Some(d) = best else { break };
            let r = &self.requests[i];
            let slot = DecodeSlot::new(r.id, r.scenario, r.output_len);
            let node = self.decodes.get_mut(&d).expect("present");
            match node.inst.decode_admit(slot) {
                Admission::Running | Admission::Queued => {
                    self.handoffs.get_mut(group).expect("present").pop_front();
                    let Stage::Handoff(p) = self.tracks[i].stage else {
                        unreachable!("handoff queue holds handoff-stage requests")
                    };
                    self.start_transfer(eng, i, p, d)?;
                }
                Admission::Refused => break,
            }
        }
        Ok(())
    }

    fn start_transfer(&mut self, eng: &mut Engine<Ev>, i: usize, p: InstanceId, d: InstanceId) -> Result<(), SimulationError> {
        let now = self.now;
        let prompt = self.requests[i].prompt_len;
        let bytes = self.cfg.model.kv_bytes(prompt).ok_or(SimulationError::KvOverflow(prompt))?;
        let tp = self.cfg.model.tp_degree;
        let sending = self.prefills.get(&p).map_or(0, |n| n.sending);
        let receiving = self.decodes.get(&d).map_or(0, |n| n.receiving);
        let concurrent = sending.max(receiving) + 1;
        let xi = request_xi(bytes, tp, self.res.transfer_mode, &self.res.link, concurrent, &mut self.rng_transfer)?;
        let ts = self.requests[i].timestamps;
        let (ps, pe) = (ts.get(Phase::PrefillStart), ts.get(Phase::PrefillEnd));
        let done_at = match (self.res.per_layer, ps, pe) {
            // Layers stream out as they are computed when the decode target
            // is known at the end of the prefill.
            (true, Some(ps), Some(pe)) if pe == now => {
                let layers = self.cfg.model.num_layers.max(1) as usize;
                let step = (pe - ps) / layers as f64;
                let ready: Vec<f64> = (1..=layers).map(|k| ps + step * k as f64).collect();
                let durations = vec![xi.xi / layers as f64; layers];
                let last = layered_completion(&ready, &durations).last().copied().unwrap_or(now);
                last.max(now + xi.xi / layers as f64)
            }
            _ => now + xi.xi,
        };
        let share = bytes.div_ceil(u64::from(tp.max(1)));
        let track = &mut self.tracks[i];
        track.stage = Stage::Transferring(p, d);
        track.bytes = bytes;
        track.conflicts = xi.conflicts() as u32;
        track.utilization = Some(utilization(share, xi.xi, &self.res.link)?);
        self.requests[i].timestamps.set(Phase::TransferStart, now)?;
        if let Some(n) = self.prefills.get_mut(&p) {
            n.sending += 1;
        }
        if let Some(n) = self.decodes.get_mut(&d) {
            n.receiving += 1;
        }
        self.schedule(
            eng,
            done_at,
            Ev::TransferDone {
                req: i,
                prefill: p,
                decode: d,
            },
        )?;
        Ok(())
    }

    fn on_transfer_done(&mut self, eng: &mut Engine<Ev>, i: usize, p: InstanceId, d: InstanceId) -> Result<(), SimulationError> {
        if let Some(n) = self.prefills.get_mut(&p) {
            n.sending = n.sending.saturating_sub(1);
        }
        if let Some(n) = self.decodes.get_mut(&d) {
            n.receiving = n.receiving.saturating_sub(1);
        }
        if self.requests[i].is_terminal() || self.tracks[i].stage != Stage::Transferring(p, d) {
            return Ok(());
        }
        let now = self.now;
        let start = self.requests[i].timestamps.get(Phase::TransferStart).unwrap_or(now);
        let elapsed = now - start;
        let track = &mut self.tracks[i];
        track.transfer = Some(elapsed);
        self.transfers.push(TransferRecord {
            done_at: now,
            xi: elapsed,
            bytes: track.bytes,
            utilization: track.utilization.unwrap_or(0.0),
            conflicts: track.conflicts,
        });
        self.requests[i].timestamps.set(Phase::TransferEnd, now)?;
        if let Some(n) = self.prefills.get_mut(&p) {
            if n.inst.holds(RequestId(i as u64)) {
                n.inst.release(RequestId(i as u64))?;
            }
        }
        self.maybe_launch(eng, p)?;
        self.tracks[i].stage = Stage::Decoding(d);
        self.requests[i].advance(RequestStatus::Decoding)?;
        let Some(node) = self.decodes.get_mut(&d) else { return Ok(()) };
        // A dead receiver keeps the request until the fault is detected.
        let start_now = node.inst.kv_arrived(RequestId(i as u64))?;
        if node.alive && start_now {
            self.start_iteration(eng, d)?;
        }
        Ok(())
    }

    fn start_iteration(&mut self, eng: &mut Engine<Ev>, d: InstanceId) -> Result<(), SimulationError> {
        let Some(node) = self.decodes.get_mut(&d) else { return Ok(()) };
        if !node.alive || node.inst.iterating() {
            return Ok(());
        }
        let period = node.inst.begin_iteration(self.now, &self.res.profiles)?;
        let epoch = node.epoch;
        let ids: Vec<usize> = node.inst.running().iter().map(|s| s.id.0 as usize).collect();
        for i in ids {
            if self.requests[i].timestamps.get(Phase::DecodeStart).is_none() {
                self.requests[i].timestamps.set(Phase::DecodeStart, self.now)?;
            }
        }
        if let Some(period) = period {
            self.schedule(eng, self.now + period, Ev::DecodeIter(d, epoch))?;
        }
        Ok(())
    }

    fn on_decode_iter(&mut self, eng: &mut Engine<Ev>, d: InstanceId, epoch: u64) -> Result<(), SimulationError> {
        let Some(node) = self.decodes.get_mut(&d) else { return Ok(()) };
        if !node.alive || node.epoch != epoch {
            return Ok(());
        }
        let done = node.inst.decode_iteration(self.now)?;
        let group = node.inst.group.clone();
        for slot in done {
            let i = slot.id.0 as usize;
            self.tracks[i].stage = Stage::Terminal;
            self.close(i, RequestStatus::Done)?;
        }
        self.start_iteration(eng, d)?;
        self.dispatch_handoffs(eng, &group)
    }

    /// Ends a request wherever it is and frees what it held.
    fn terminate(&mut self, eng: &mut Engine<Ev>, i: usize, status: RequestStatus) -> Result<(), SimulationError> {
        let id = RequestId(i as u64);
        let stage = std::mem::replace(&mut self.tracks[i].stage, Stage::Terminal);
        let mut relaunch = None;
        let mut decode = None;
        match stage {
            Stage::Waiting => {
                self.gateway.withdraw(self.requests[i].scenario, id);
            }
            Stage::Queued(p) => {
                if let Some(n) = self.prefills.get_mut(&p) {
                    n.inst.dequeue(id);
                }
            }
            Stage::Forming(p) => {
                if let Some(n) = self.prefills.get_mut(&p) {
                    n.inst.withdraw(id);
                }
            }
            // Released when the batch completes.
            Stage::Prefilling(_) => {}
            Stage::Handoff(p) => {
                let group = self.prefills.get(&p).map(|n| n.inst.group.clone());
                if let Some(q) = group.and_then(|g| self.handoffs.get_mut(&g)) {
                    q.retain(|&x| x != i);
                }
                self.release_slot(p, id)?;
                relaunch = Some(p);
            }
            Stage::Transferring(p, d) => {
                self.release_slot(p, id)?;
                relaunch = Some(p);
                if let Some(n) = self.decodes.get_mut(&d) {
                    n.inst.cancel_reservation(id);
                }
                decode = Some(d);
            }
            Stage::Decoding(d) => {
                if let Some(n) = self.decodes.get_mut(&d) {
                    n.inst.abort(id);
                }
                decode = Some(d);
            }
            Stage::Terminal => return Ok(()),
        }
        self.close(i, status)?;
        if let Some(p) = relaunch {
            self.maybe_launch(eng, p)?;
        }
        if let Some(d) = decode {
            self.start_iteration(eng, d)?;
            if let Some(g) = self.decodes.get(&d).map(|n| n.inst.group.clone()) {
                self.dispatch_handoffs(eng, &g)?;
            }
        }
        Ok(())
    }

    fn release_slot(&mut self, p: InstanceId, id: RequestId) -> Result<(), SimulationError> {
        if let Some(n) = self.prefills.get_mut(&p) {
            if n.inst.holds(id) {
                n.inst.release(id)?;
            }
        }
        Ok(())
    }

    /// Records the terminal status and closes the client connection.
    fn close(&mut self, i: usize, status: RequestStatus) -> Result<(), SimulationError> {
        let now = self.now;
        let id = RequestId(i as u64);
        self.requests[i].finish(status, now)?;
        if self.gateway.has_open(id) {
            if let Err(e) = self.gateway.sse_close(id) {
                self.violations.push(format!("request {i}: {e}"));
            }
        }
        let r = &self.requests[i];
        let spec = self.res.workload.scenario(r.scenario);
        let tp = r.timestamps.get(Phase::PrefillEnd).map(|t| t - r.arrival);
        let e2e = now - r.arrival;
        let ok = status == RequestStatus::Done && tp.is_some_and(|t| t <= spec.ttft_slo) && e2e <= spec.e2e_timeout;
        let track = &self.tracks[i];
        self.outcomes.push(RequestOutcome {
            id: r.id.0,
            scenario: r.scenario.0,
            group: track.group.map(|g| self.group_names[g].clone()),
            arrival: r.arrival,
            finish: now,
            status,
            ok,
            tp,
            td: r.timestamps.get(Phase::PrefillEnd).map(|t| now - t),
            e2e,
            transfer: track.transfer,
            utilization: track.utilization,
            attempts: self.gateway.attempts(id).len() as u32,
        });
        Ok(())
    }

    // ---- faults and the control plane ----

    fn inject(&mut self, instance: InstanceId, level: FaultLevel) {
        if self.faulted.contains_key(&instance) {
            return;
        }
        let mut hit = false;
        if let Some(n) = self.prefills.get_mut(&instance) {
            n.alive = false;
            hit = true;
        }
        if let Some(n) = self.decodes.get_mut(&instance) {
            n.alive = false;
            hit = true;
        }
        if hit {
            self.faulted.insert(instance, (level, self.now));
            self.fault_stats.injected += 1;
        }
    }

    fn on_fault_spec(&mut self, idx: usize) -> Result<(), SimulationError> {
        let f = self.cfg.faults[idx].clone();
        let target = self
            .registry
            .group(&f.group)
            .ok()
            .and_then(|g| g.active(f.role).map(|m| m.instance).nth(f.index as usize));
        match target {
            Some(inst) => self.inject(inst, f.level),
            None => self.registry.alerts.push(Alert {
                at: self.now,
                group: f.group.clone(),
                message: format!("fault target {:?} #{} not found", f.role, f.index),
            }),
        }
        Ok(())
    }

    fn on_drill(&mut self, eng: &mut Engine<Ev>) -> Result<(), SimulationError> {
        let Some(drill) = self.cfg.fault_drill.clone() else { return Ok(()) };
        let pool: Vec<InstanceId> = self
            .registry
            .groups()
            .filter(|g| g.state.is_active())
            .flat_map(|g| g.members.values())
            .filter(|m| m.state == MemberState::Active && !self.faulted.contains_key(&m.instance))
            .map(|m| m.instance)
            .filter(|i| self.prefills.get(i).is_some_and(|n| n.alive) || self.decodes.get(i).is_some_and(|n| n.alive))
            .collect();
        if pool.is_empty() {
            self.registry.alerts.push(Alert {
                at: self.now,
                group: String::new(),
                message: "fault drill found no active instance".into(),
            });
        } else {
            let pick = pool[self.rng_faults.random_range(0..pool.len())];
            self.inject(pick, drill.level);
        }
        self.drill_left = self.drill_left.saturating_sub(1);
        if self.drill_left > 0 {
            self.schedule(eng, self.now + drill.interval, Ev::Drill)?;
        }
        Ok(())
    }

    fn on_health_tick(&mut self, eng: &mut Engine<Ev>) -> Result<(), SimulationError> {
        let now = self.now;
        let alive: Vec<InstanceId> = self
            .prefills
            .iter()
            .filter(|(_, n)| n.alive)
            .map(|(&i, _)| i)
            .chain(self.decodes.iter().filter(|(_, n)| n.alive).map(|(&i, _)| i))
            .collect();
        for i in alive {
            self.registry.health.report(i, now, HealthStatus::Ok);
        }
        for (&i, &(level, _)) in &self.faulted {
            if level == FaultLevel::RecoverableInPlace && !self.detected.contains(&i) {
                self.registry.health.report(i, now, HealthStatus::Fault(level));
            }
        }
        let timing = *self.registry.timing();
        for (i, _) in self.registry.health.unhealthy(now, &timing) {
            if self.detected.contains(&i) {
                continue;
            }
            if let Some(&(level, at)) = self.faulted.get(&i) {
                self.detect(eng, i, level, at)?;
            }
        }
        self.schedule(eng, now + timing.health_interval, Ev::HealthTick)?;
        Ok(())
    }

    fn detect(&mut self, eng: &mut Engine<Ev>, i: InstanceId, level: FaultLevel, injected: f64) -> Result<(), SimulationError> {
        let now = self.now;
        self.detected.insert(i);
        self.fault_stats.detected += 1;
        self.fault_stats.detection_delays.push(now - injected);
        let group = self.registry.locate(i).map(|(g, _)| g.name.clone());
        let start = self.registry.begin_recovery(FaultEvent::new(i, level, now), now, &mut self.rng_control)?;
        match start {
            RecoveryStart::Started(wf) => {
                self.track_workflow(eng, wf)?;
                self.schedule(eng, now + self.res.timing.repair_time, Ev::Repair)?;
            }
            RecoveryStart::Parked { .. } => {
                self.fault_stats.max_parked = self.fault_stats.max_parked.max(self.registry.parked_recoveries());
                self.schedule(eng, now + self.res.timing.repair_time, Ev::Repair)?;
            }
            RecoveryStart::Restarting(wf) => {
                self.fault_stats.restarts += 1;
                self.track_workflow(eng, wf)?;
            }
            RecoveryStart::NoOp => {}
        }
        if let Some(g) = group {
            self.publish(eng, &g)?;
        }
        self.evict(eng, i)?;
        self.ensure_drain_check(eng)
    }

    /// Fails every request the dead instance held.
    fn evict(&mut self, eng: &mut Engine<Ev>, i: InstanceId) -> Result<(), SimulationError> {
        let now = self.now;
        let mut ids = Vec::new();
        if let Some(n) = self.prefills.get_mut(&i) {
            ids.extend(n.inst.evict_all(now));
            if let Some(h) = n.window.take() {
                eng.cancel(h);
            }
        }
        if let Some(n) = self.decodes.get_mut(&i) {
            ids.extend(n.inst.evict_all(now));
        }
        for id in ids {
            let idx = id.0 as usize;
            if !self.requests[idx].is_terminal() {
                self.fault_stats.failed_requests += 1;
                self.terminate(eng, idx, RequestStatus::Failed)?;
            }
        }
        Ok(())
    }

    fn track_workflow(&mut self, eng: &mut Engine<Ev>, wf: PendingWorkflow) -> Result<(), SimulationError> {
        if matches!(wf.transcript.outcome, Outcome::Aborted { .. }) {
            if self.upgrade_current.as_deref() == Some(wf.transcript.group.as_str())
                && wf.transcript.kind == WorkflowKind::Setup
            {
                self.upgrade_next(eng)?;
            }
            return Ok(());
        }
        self.schedule(eng, wf.finish_at, Ev::WorkflowDone(wf.id))?;
        Ok(())
    }

    fn publish(&mut self, eng: &mut Engine<Ev>, group: &str) -> Result<(), SimulationError> {
        let view = self.registry.view(group)?;
        self.last_publish.insert(group.to_string(), self.now);
        let at = self.now + self.res.timing.propagation_delay;
        self.schedule(eng, at, Ev::MetaPropagated(view))?;
        Ok(())
    }

    fn on_workflow_done(&mut self, eng: &mut Engine<Ev>, id: WorkflowId) -> Result<(), SimulationError> {
        let done = self.registry.complete(id, self.now)?;
        let group = done.transcript.group.clone();
        for &e in &done.erased {
            self.evict(eng, e)?;
            self.prefills.remove(&e);
            self.decodes.remove(&e);
            self.faulted.remove(&e);
            self.detected.remove(&e);
        }
        for &(inst, role) in &done.activated {
            self.faulted.remove(&inst);
            self.detected.remove(&inst);
            match role {
                Role::Prefill => {
                    let epoch = self.prefills.get(&inst).map_or(0, |n| n.epoch + 1);
                    self.add_prefill(inst, &group);
                    self.prefills.get_mut(&inst).expect("added").epoch = epoch;
                }
                Role::Decode => {
                    let epoch = self.decodes.get(&inst).map_or(0, |n| n.epoch + 1);
                    self.add_decode(inst, &group);
                    self.decodes.get_mut(&inst).expect("added").epoch = epoch;
                }
            }
        }
        match done.transcript.kind {
            WorkflowKind::Recovery => self.fault_stats.recovery_additions.push(done.transcript.containers_added),
            WorkflowKind::Setup => {
                if self.upgrade_current.as_deref() == Some(group.as_str()) {
                    if let Some(step) = self.upgrade_log.last_mut() {
                        step.ready_at = Some(self.now);
                    }
                    self.publish(eng, &group)?;
                    return self.upgrade_next(eng);
                }
            }
            WorkflowKind::AddMembers | WorkflowKind::Restart => {}
        }
        if done.view.is_some() {
            self.publish(eng, &group)?;
        }
        self.ensure_drain_check(eng)
    }

    fn on_meta(&mut self, eng: &mut Engine<Ev>, view: GroupView) -> Result<(), SimulationError> {
        let current = self.registry.group(&view.group).map_or(0, |g| g.meta_version);
        if view.version > current {
            self.violations.push(format!(
                "group {} view version {} ahead of registry version {current}",
                view.group, view.version
            ));
        }
        let newer = self.views.get(&view.group).is_none_or(|v| v.version <= view.version);
        if !newer {
            return Ok(());
        }
        let group = view.group.clone();
        self.views.insert(group.clone(), view);
        self.rebuild_candidates();
        for sid in self.gateway.scenarios_waiting() {
            self.kick(eng, sid, self.now)?;
        }
        self.dispatch_handoffs(eng, &group)
    }

    fn on_repair(&mut self, eng: &mut Engine<Ev>) -> Result<(), SimulationError> {
        self.registry.repair_containers(self.now);
        self.containers_freed(eng)
    }

    /// Hands free containers to whoever waits for one.
    fn containers_freed(&mut self, eng: &mut Engine<Ev>) -> Result<(), SimulationError> {
        let started = self.registry.resume_parked(self.now, &mut self.rng_control);
        for wf in started {
            let g = wf.transcript.group.clone();
            self.track_workflow(eng, wf)?;
            self.publish(eng, &g)?;
        }
        self.process_scaling(eng)?;
        if self.upgrade_awaiting_setup {
            self.upgrade_setup(eng)?;
        }
        Ok(())
    }

    fn on_scaling(&mut self, eng: &mut Engine<Ev>, idx: usize) -> Result<(), SimulationError> {
        let s = self.cfg.scaling[idx].clone();
        let Some(base) = self.res.shapes.get(&s.group).copied() else { return Ok(()) };
        let target = ClusterShape {
            n_prefill: s.n_prefill,
            n_decode: s.n_decode,
            ..base
        };
        match self.registry.adjust_ratio(&s.group, &target, AdjustPolicy::ProfileDriven) {
            Ok(plan) => {
                self.scaling_log.push((self.now, s.group.clone(), plan.steps.clone()));
                self.scaling_queue.extend(plan.steps.into_iter().map(|st| (s.group.clone(), st)));
                self.process_scaling(eng)
            }
            Err(e) => {
                self.registry.alerts.push(Alert {
                    at: self.now,
                    group: s.group.clone(),
                    message: format!("ratio adjustment refused: {e}"),
                });
                Ok(())
            }
        }
    }

    fn process_scaling(&mut self, eng: &mut Engine<Ev>) -> Result<(), SimulationError> {
        while let Some((group, step)) = self.scaling_queue.front().cloned() {
            match step {
                PlanStep::Remove { instance } => {
                    match self.registry.remove_members(&group, &[instance], self.now) {
                        Ok(_) => {
                            self.publish(eng, &group)?;
                            self.ensure_drain_check(eng)?;
                        }
                        Err(e) => self.registry.alerts.push(Alert {
                            at: self.now,
                            group: group.clone(),
                            message: format!("scale-in skipped: {e}"),
                        }),
                    }
                }
                PlanStep::Add { role } => {
                    if self.registry.free_containers() == 0 {
                        break;
                    }
                    match self.registry.begin_add(&group, role, 1, self.now, &mut self.rng_control) {
                        Ok(wf) => self.track_workflow(eng, wf)?,
                        Err(e) => self.registry.alerts.push(Alert {
                            at: self.now,
                            group: group.clone(),
                            message: format!("scale-out skipped: {e}"),
                        }),
                    }
                }
            }
            self.scaling_queue.pop_front();
        }
        Ok(())
    }

    fn upgrade_next(&mut self, eng: &mut Engine<Ev>) -> Result<(), SimulationError> {
        self.upgrade_current = None;
        self.upgrade_awaiting_setup = false;
        while let Some(g) = self.upgrade_queue.pop_front() {
            match self.registry.drain_group(&g, self.now) {
                Ok(_) => {
                    self.upgrade_log.push(UpgradeStep {
                        group: g.clone(),
                        drain_started: self.now,
                        removed_at: None,
                        ready_at: None,
                    });
                    self.upgrade_current = Some(g.clone());
                    self.publish(eng, &g)?;
                    return self.ensure_drain_check(eng);
                }
                Err(e) => self.registry.alerts.push(Alert {
                    at: self.now,
                    group: g.clone(),
                    message: format!("upgrade skipped: {e}"),
                }),
            }
        }
        Ok(())
    }

    fn upgrade_setup(&mut self, eng: &mut Engine<Ev>) -> Result<(), SimulationError> {
        let Some(g) = self.upgrade_current.clone() else { return Ok(()) };
        let Some(spec) = self.res.groups.iter().find(|s| s.name == g).cloned() else { return Ok(()) };
        match self.registry.begin_setup(&spec, self.now, &mut self.rng_control) {
            Ok(wf) => {
                self.upgrade_awaiting_setup = false;
                self.track_workflow(eng, wf)
            }
            Err(ControlError::InsufficientContainers { .. }) => {
                self.upgrade_awaiting_setup = true;
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    fn ensure_drain_check(&mut self, eng: &mut Engine<Ev>) -> Result<(), SimulationError> {
        if !self.drain_check_pending {
            self.drain_check_pending = self.schedule(eng, self.now, Ev::DrainCheck)?.is_some();
        }
        Ok(())
    }

    fn prefill_idle(&self, i: InstanceId) -> bool {
        self.prefills.get(&i).is_none_or(|n| {
            !n.alive || (n.inst.occupied_slots() == 0 && n.inst.local_queue().is_empty() && !n.inst.busy())
        })
    }

    fn decode_idle(&self, i: InstanceId) -> bool {
        self.decodes
            .get(&i)
            .is_none_or(|n| !n.alive || (n.inst.load() == 0 && !n.inst.iterating()))
    }

    fn on_drain_check(&mut self, eng: &mut Engine<Ev>) -> Result<(), SimulationError> {
        let mut release = Vec::new();
        let mut waiting = false;
        for g in self.registry.groups() {
            if g.state == GroupState::Removed {
                continue;
            }
            let draining = |state: MemberState| {
                state == MemberState::Draining || (g.state == GroupState::Draining && state == MemberState::Faulted)
            };
            // Decodes stay until the group's draining prefills have handed off.
            let prefills_busy = g
                .members
                .values()
                .any(|m| m.role == Role::Prefill && draining(m.state) && !self.prefill_idle(m.instance));
            for m in g.members.values().filter(|m| draining(m.state)) {
                let idle = match m.role {
                    Role::Prefill => self.prefill_idle(m.instance),
                    Role::Decode => !prefills_busy && self.decode_idle(m.instance),
                };
                if idle {
                    release.push((g.name.clone(), m.instance));
                } else {
                    waiting = true;
                }
            }
        }
        let released = !release.is_empty();
        for (group, inst) in release {
            self.evict(eng, inst)?;
            self.prefills.remove(&inst);
            self.decodes.remove(&inst);
            self.faulted.remove(&inst);
            self.detected.remove(&inst);
            self.registry.release_member(inst)?;
            if self.registry.group(&group)?.state == GroupState::Removed {
                self.publish(eng, &group)?;
                if self.upgrade_current.as_deref() == Some(group.as_str()) {
                    if let Some(step) = self.upgrade_log.last_mut() {
                        step.removed_at = Some(self.now);
                    }
                    self.upgrade_setup(eng)?;
                }
            }
        }
        if released {
            self.rebuild_candidates();
            self.containers_freed(eng)?;
        }
        if waiting && !self.drain_check_pending {
            self.drain_check_pending = self.schedule(eng, self.now + DRAIN_POLL, Ev::DrainCheck)?.is_some();
        }
        Ok(())
    }

    fn on_monitor(&mut self, eng: &mut Engine<Ev>) -> Result<(), SimulationError> {
        let Some(m) = self.cfg.monitor.clone() else { return Ok(()) };
        let now = self.now;
        let from = now - m.window;
        let window: Vec<&RequestOutcome> = self
            .outcomes
            .iter()
            .filter(|o| o.ok && o.finish > from && o.finish <= now && o.group.as_deref() == Some(m.group.as_str()))
            .collect();
        if !window.is_empty() {
            let n = window.len() as f64;
            let e2e = window.iter().map(|o| o.e2e).sum::<f64>() / n;
            let tp = window.iter().filter_map(|o| o.tp).sum::<f64>() / n;
            let cur = MonitorSample {
                e2e,
                tp_share: if e2e > 0.0 { tp / e2e } else { 0.0 },
            };
            let mut added = None;
            if let Some(prev) = self.monitor_prev {
                if let Some(role) = monitor_decision(prev, cur, m.e2e_tolerance, m.share_tolerance) {
                    if self.monitor_added < m.max_additions && self.registry.free_containers() > 0 {
                        if let Ok(wf) = self.registry.begin_add(&m.group, role, 1, now, &mut self.rng_control) {
                            self.track_workflow(eng, wf)?;
                            self.monitor_added += 1;
                            added = Some(role);
                        }
                    }
                }
            }
            self.monitor_log.push(MonitorRecord { at: now, sample: cur, added });
            self.monitor_prev = Some(cur);
        }
        self.schedule(eng, now + m.window, Ev::MonitorTick)?;
        Ok(())
    }

    fn on_sample(&mut self, eng: &mut Engine<Ev>) -> Result<(), SimulationError> {
        let active = self
            .registry
            .groups()
            .flat_map(|g| g.members.values())
            .filter(|m| m.state == MemberState::Active)
            .filter(|m| {
                self.prefills.get(&m.instance).is_some_and(|n| n.alive)
                    || self.decodes.get(&m.instance).is_some_and(|n| n.alive)
            })
            .count() as u32;
        self.samples.push(Sample {
            t: self.now,
            active_instances: active,
            cache_hits: self.cache_hits,
            cache_lookups: self.cache_lookups,
        });
        self.check_slots();
        self.schedule(eng, self.now + self.cfg.bucket, Ev::Sample)?;
        Ok(())
    }

    /// Every held prefill slot must belong to a request that is at that
    /// prefill, and no instance may exceed its capacity.
    fn check_slots(&mut self) {
        let mut found = Vec::new();
        for (&p, n) in &self.prefills {
            if !n.alive {
                continue;
            }
            for id in n.inst.slots() {
                let ok = matches!(
                    self.tracks[id.0 as usize].stage,
                    Stage::Forming(x) | Stage::Prefilling(x) | Stage::Handoff(x) | Stage::Transferring(x, _) if x == p
                );
                if !ok {
                    found.push(format!("prefill {} holds a slot for request {} elsewhere", p.0, id.0));
                }
            }
            if n.inst.mode() == PrefillMode::Reject && !n.inst.local_queue().is_empty() {
                found.push(format!("prefill {} queued requests in reject mode", p.0));
            }
            if n.inst.cache().used() > n.inst.cache().budget() {
                found.push(format!("prefill {} prefix cache over budget", p.0));
            }
        }
        for (&d, n) in &self.decodes {
            let cap = n.inst.max_batch() as usize + n.inst.retrieval_capacity() as usize;
            if n.inst.load() > cap {
                found.push(format!("decode {} over capacity", d.0));
            }
        }
        self.violations.extend(found);
    }

    fn finish(mut self, engine: RunStats) -> RunOutput {
        let end = self.end;
        if engine.order_violations > 0 {
            self.violations
                .push(format!("{} events dispatched out of order", engine.order_violations));
        }
        if let Err(e) = self.gateway.check_attempt_log() {
            self.violations.push(e);
        }
        if let Err(e) = self.registry.check_endpoints() {
            self.violations.push(e.to_string());
        }
        let unfinished: Vec<usize> = (0..self.requests.len()).filter(|&i| !self.requests[i].is_terminal()).collect();
        let open_live = unfinished
            .iter()
            .filter(|&&i| self.gateway.has_open(RequestId(i as u64)))
            .count();
        if open_live != self.gateway.open_connections() {
            self.violations.push(format!(
                "{} open connections but only {} live requests hold one",
                self.gateway.open_connections(),
                open_live
            ));
        }

        let prop = self.res.timing.propagation_delay;
        for (group, &at) in &self.last_publish {
            let registry = self.registry.group(group).map_or(0, |g| g.meta_version);
            let local = self.views.get(group).map_or(0, |v| v.version);
            if end - at > prop && local != registry {
                self.violations.push(format!(
                    "group {group} view at version {local} never caught up with registry version {registry}"
                ));
            }
        }

        let mut histogram: BTreeMap<usize, u64> = BTreeMap::new();
        for log in self.gateway.attempt_log().values() {
            *histogram.entry(log.len()).or_default() += 1;
        }

        let mut analytic = Vec::new();
        for spec in &self.res.groups {
            let shape = self.res.shapes[&spec.name];
            let mut traffic = 0.0;
            for s in &spec.scenarios {
                let serving = self.res.groups.iter().filter(|g| g.scenarios.contains(s)).count().max(1);
                traffic += self.res.trace.mean_rate(s) / serving as f64;
            }
            let estimate = if spec.scenarios.len() == 1 {
                let sid = self
                    .res
                    .workload
                    .scenario_id(spec.scenarios.iter().next().expect("one"))
                    .expect("resolved");
                cluster_throughput(self.res.profile(sid), &shape, traffic).ok()
            } else {
                None
            };
            analytic.push(AnalyticRow {
                group: spec.name.clone(),
                shape,
                traffic,
                estimate,
            });
        }

        let mut instances = Vec::new();
        for (&i, n) in &self.prefills {
            instances.push(InstanceReport {
                id: i.0,
                role: Role::Prefill,
                group: n.inst.group.clone(),
                busy_fraction: n.inst.busy_time_at(end) / end,
            });
        }
        for (&i, n) in &self.decodes {
            instances.push(InstanceReport {
                id: i.0,
                role: Role::Decode,
                group: n.inst.group.clone(),
                busy_fraction: n.inst.busy_time_at(end) / end,
            });
        }

        self.outcomes.sort_by_key(|o| o.id);
        let arrivals: Vec<f64> = self.requests.iter().map(|r| r.arrival).collect();
        let frame = MetricsFrame::build(&self.outcomes, &arrivals, &self.transfers, &self.samples, self.cfg.bucket, end);
        let summary = Summary::build(
            &self.outcomes,
            &self.transfers,
            &self.samples,
            self.cfg.warmup,
            self.cfg.duration,
        );
        let names: Vec<String> = self.res.workload.scenarios().iter().map(|s| s.name.clone()).collect();
        let scenarios = ScenarioStats::build(&self.outcomes, &names, self.cfg.warmup, self.cfg.duration);
        let report = RunReport {
            name: self.cfg.name.clone(),
            seed: self.cfg.seed,
            policy: self.res.gateway.policy,
            end,
            requests: self.requests.len() as u64,
            summary,
            scenarios,
            analytic,
            gateway: self.gateway.counters.clone(),
            attempts_histogram: histogram,
            faults: self.fault_stats,
            upgrade: self.upgrade_log,
            scaling: self.scaling_log,
            monitor: self.monitor_log,
            transcripts: self.registry.transcripts.clone(),
            alerts: self.registry.alerts.clone(),
            instances,
            unfinished: unfinished.len() as u64,
            late_routes: self.late_routes,
            violations: self.violations,
            engine,
        };
        RunOutput {
            frame,
            report,
            outcomes: self.outcomes,
            transfers: self.transfers,
            samples: self.samples,
            events: self.log,
        }
    }
}

fn offer_to(prefills: &mut BTreeMap<InstanceId, PrefillNode>, p: InstanceId, item: PrefillItem) -> Offer {
    match prefills.get_mut(&p) {
        // A dead instance never answers; the gateway treats that as a refusal.
        Some(n) if n.alive => n.inst.offer(item),
        _ => Offer::Rejected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
name = "small"
seed = 11
duration = 60.0
warmup = 10.0
bucket = 10.0

[model]
hidden_size = 1024
num_layers = 8
bytes_per_elem = 2
tp_degree = 2

[[scenarios]]
name = "chat"
prompt_len = [[512, 1.0]]
output_len = [[20, 0.5], [40, 0.5]]
prefixes = [{ name = "sys", len = 128, weight = 1.0 }]
ttft_slo_ms = 2000.0
e2e_timeout_ms = 20000.0

[profiles.chat]
ttft_ms = [[1, 100.0], [4, 250.0]]
tpot_ms = [[1, 20.0], [16, 40.0]]
prefix_benefit = 0.8

[[groups]]
name = "g0"
scenarios = ["chat"]
n_prefill = 2
n_decode = 2
batch_prefill = 4
batch_decode = 16

[[traffic.slots]]
start = 0.0
rates = { chat = 5.0 }
"#;

    fn small() -> RunConfig {
        RunConfig::from_toml(SMALL).unwrap()
    }

    #[test]
    fn light_load_completes_everything() {
        let out = run(&small(), SimOptions::default()).unwrap();
        let r = &out.report;
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        assert_eq!(r.unfinished, 0);
        assert_eq!(out.outcomes.len() as u64, r.requests);
        assert!(r.summary.success_rate.unwrap() > 0.99);
        assert_eq!(r.scenarios[0].ttft.as_ref().unwrap().count, r.summary.arrivals);
        assert!(out.transfers.iter().all(|t| t.xi > 0.0));
        for o in &out.outcomes {
            assert!(o.ok);
            assert!(o.tp.unwrap() <= 2.0);
        }
    }

    #[test]
    fn zero_traffic_gives_zero_series() {
        let mut cfg = small();
        cfg.scale_traffic(0.0);
        let out = run(&cfg, SimOptions::default()).unwrap();
        assert_eq!(out.report.requests, 0);
        assert!(out.report.violations.is_empty());
        assert!(!out.frame.rows.is_empty());
        for row in &out.frame.rows {
            assert_eq!((row.arrivals, row.completed, row.rps), (0, 0, 0.0));
            assert_eq!(row.success_rate, None);
        }
        assert_eq!(out.report.summary.success_rate, None);
        assert_eq!(out.report.scenarios[0].success_rate, None);
        assert!(out.frame.to_csv().lines().nth(1).unwrap().contains(",0,0,0,0,"));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = run(&small(), SimOptions::default()).unwrap();
        let b = run(&small(), SimOptions::default()).unwrap();
        assert_eq!(a.frame.to_csv(), b.frame.to_csv());
        assert_eq!(a.report_json(), b.report_json());
    }

    #[test]
    fn baseline_policy_runs_clean() {
        let mut cfg = small();
        cfg.gateway.policy = GatewayPolicy::Baseline;
        let out = run(&cfg, SimOptions::default()).unwrap();
        assert!(out.report.violations.is_empty(), "{:?}", out.report.violations);
        assert_eq!(out.report.unfinished, 0);
        assert!(out.report.summary.success_rate.unwrap() > 0.99);
    }

    #[test]
    fn overload_times_out_at_gateway() {
        let mut cfg = small();
        cfg.scale_traffic(20.0);
        let out = run(&cfg, SimOptions::default()).unwrap();
        let r = &out.report;
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        assert!(r.gateway.early_terminations > 0);
        assert!(r.summary.timeouts_ttft > 0);
        // Acceptance happens within the SLO; then at most one batch window
        // (0.1 * 100 ms) and one prefill (250 ms) follow.
        for o in out.outcomes.iter().filter(|o| o.status == RequestStatus::Done) {
            assert!(o.tp.unwrap() <= 2.0 + 0.01 + 0.25 + 1e-9, "{o:?}");
        }
    }

    #[test]
    fn substitution_fault_is_recovered() {
        let mut cfg = small();
        cfg.faults.push(crate::config::FaultSpec {
            at: 20.0,
            group: "g0".into(),
            role: Role::Decode,
            index: 0,
            level: FaultLevel::SubstituteRequired,
        });
        cfg.control.spare_containers = 1;
        cfg.duration = 400.0;
        let out = run(&cfg, SimOptions::default()).unwrap();
        let r = &out.report;
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        assert_eq!(r.faults.injected, 1);
        assert_eq!(r.faults.detected, 1);
        assert_eq!(r.faults.recovery_additions, vec![1]);
        assert!(r.faults.detection_delays[0] > 30.0 - 1e-9);
        let late = out.outcomes.iter().filter(|o| o.arrival > 350.0);
        assert!(late.clone().count() > 0 && late.clone().all(|o| o.ok));
    }

    #[test]
    fn event_log_is_ordered() {
        let out = run(&small(), SimOptions { event_log: true }).unwrap();
        let recs = out.events.records();
        assert!(!recs.is_empty());
        assert!(recs.windows(2).all(|w| (w[0].time, w[0].seq) < (w[1].time, w[1].seq) || w[0].time < w[1].time));
    }
}
