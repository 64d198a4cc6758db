//! Group registry and orchestration workflows.
//!
//! The registry is the authoritative store for P/D groups. Workflows are
//! computed in two phases: `begin_*` reserves containers, draws step timings
//! and returns a pending workflow with its finish time; the simulator calls
//! [`Registry::complete`] at that time to apply the membership change. Peers
//! learn about changes only when the published [`GroupView`] propagates.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::InstanceId;
use crate::perf_model::ClusterShape;
use crate::sim::DelayDist;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("unknown group {0}")]
    UnknownGroup(String),
    #[error("group {0} already exists")]
    DuplicateGroup(String),
    #[error("group {group} is {state:?} and cannot be changed")]
    InvalidState { group: String, state: GroupState },
    #[error("need {needed} free containers, have {available}")]
    InsufficientContainers { needed: usize, available: usize },
    #[error("instance {0} is not an active member of group {1}")]
    NotMember(u32, String),
    #[error("removing would leave group {group} without a {role:?} instance")]
    LastOfRole { group: String, role: Role },
    #[error("unknown workflow {0}")]
    UnknownWorkflow(u64),
    #[error("target shape must have at least one prefill and one decode")]
    InvalidTarget,
    #[error("endpoint {0} appears more than once")]
    DuplicateEndpoint(String),
    #[error("invalid control timing: {0}")]
    InvalidTiming(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContainerId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WorkflowId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ContainerState {
    Free,
    Reserved,
    Assigned { instance: InstanceId },
    Faulted { until: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Container {
    pub id: ContainerId,
    pub endpoints: Vec<String>,
    /// Unreachable containers never answer collection or connection requests.
    pub reachable: bool,
    pub state: ContainerState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupState {
    Collecting,
    Initializing,
    Healthy,
    Degraded,
    Draining,
    Removed,
}

impl GroupState {
    pub fn is_active(self) -> bool {
        matches!(self, GroupState::Healthy | GroupState::Degraded)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberState {
    Loading,
    Active,
    /// Logically removed: no new traffic, in-flight work drains.
    Draining,
    Faulted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Member {
    pub instance: InstanceId,
    pub role: Role,
    pub container: ContainerId,
    pub endpoints: Vec<String>,
    pub state: MemberState,
    pub removed_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRecord {
    pub name: String,
    pub service: String,
    pub scenarios: BTreeSet<String>,
    pub members: BTreeMap<InstanceId, Member>,
    pub state: GroupState,
    pub meta_version: u64,
}

impl GroupRecord {
    pub fn active(&self, role: Role) -> impl Iterator<Item = &Member> + '_ {
        self.members
            .values()
            .filter(move |m| m.role == role && m.state == MemberState::Active)
    }

    pub fn active_count(&self, role: Role) -> usize {
        self.active(role).count()
    }

    /// `role -> [(instance, endpoints)]`, the map peers exchange.
    pub fn role_map(&self) -> BTreeMap<Role, Vec<(InstanceId, Vec<String>)>> {
        let mut map: BTreeMap<Role, Vec<(InstanceId, Vec<String>)>> = BTreeMap::new();
        for m in self.members.values().filter(|m| m.state == MemberState::Active) {
            map.entry(m.role).or_default().push((m.instance, m.endpoints.clone()));
        }
        map
    }

    fn bump(&mut self) {
        self.meta_version += 1;
    }
}

/// Routing-relevant snapshot of a group, as seen by peers and the gateway.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupView {
    pub group: String,
    pub version: u64,
    pub scenarios: BTreeSet<String>,
    pub prefills: Vec<InstanceId>,
    pub decodes: Vec<InstanceId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelStore {
    Sfs,
    Ssd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleLoad {
    pub prefill: DelayDist,
    pub decode: DelayDist,
}

/// Durations of workflow steps, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlTiming {
    pub report_delay: DelayDist,
    pub collect_timeout: f64,
    pub collect_retries: u32,
    pub init_time: f64,
    pub connect_time: DelayDist,
    pub connect_timeout: f64,
    pub model_store: ModelStore,
    pub load_sfs: RoleLoad,
    pub load_ssd: RoleLoad,
    pub first_report: f64,
    pub propagation_delay: f64,
    pub health_interval: f64,
    pub miss_threshold: u32,
    pub repair_time: f64,
    pub restart_time: f64,
}

impl Default for ControlTiming {
    fn default() -> Self {
        Self {
            report_delay: DelayDist::Uniform { min: 0.5, max: 2.0 },
            collect_timeout: 30.0,
            collect_retries: 3,
            init_time: 5.0,
            connect_time: DelayDist::Uniform { min: 1.0, max: 3.0 },
            connect_timeout: 30.0,
            model_store: ModelStore::Ssd,
            load_sfs: RoleLoad {
                prefill: DelayDist::Uniform { min: 120.0, max: 240.0 },
                decode: DelayDist::Uniform { min: 150.0, max: 300.0 },
            },
            load_ssd: RoleLoad {
                prefill: DelayDist::Uniform { min: 40.0, max: 80.0 },
                decode: DelayDist::Uniform { min: 50.0, max: 100.0 },
            },
            first_report: 1.0,
            propagation_delay: 0.5,
            health_interval: 10.0,
            miss_threshold: 3,
            repair_time: 600.0,
            restart_time: 60.0,
        }
    }
}

impl ControlTiming {
    pub fn validate(&self) -> Result<(), ControlError> {
        let dists = [
            self.report_delay,
            self.connect_time,
            self.load_sfs.prefill,
            self.load_sfs.decode,
            self.load_ssd.prefill,
            self.load_ssd.decode,
        ];
        if !dists.iter().all(DelayDist::is_valid) {
            return Err(ControlError::InvalidTiming("delay distribution"));
        }
        let nonneg = [
            self.collect_timeout,
            self.init_time,
            self.connect_timeout,
            self.first_report,
            self.propagation_delay,
            self.repair_time,
            self.restart_time,
        ];
        if !nonneg.iter().all(|x| x.is_finite() && *x >= 0.0) {
            return Err(ControlError::InvalidTiming("durations must be finite and non-negative"));
        }
        if !(self.health_interval > 0.0 && self.health_interval.is_finite()) || self.miss_threshold == 0 {
            return Err(ControlError::InvalidTiming("health interval and miss threshold must be positive"));
        }
        Ok(())
    }

    fn load(&self, role: Role) -> DelayDist {
        let l = match self.model_store {
            ModelStore::Sfs => self.load_sfs,
            ModelStore::Ssd => self.load_ssd,
        };
        match role {
            Role::Prefill => l.prefill,
            Role::Decode => l.decode,
        }
    }

    /// Seconds without a report after which an instance counts as missing.
    pub fn missing_after(&self) -> f64 {
        self.health_interval * f64::from(self.miss_threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealthStatus {
    Ok,
    Fault(FaultLevel),
    Missing,
}

/// Last health report per instance.
#[derive(Debug, Clone, Default, Serialize)]
pub struct HealthLedger {
    entries: BTreeMap<InstanceId, (f64, HealthStatus)>,
}

impl HealthLedger {
    pub fn report(&mut self, instance: InstanceId, now: f64, status: HealthStatus) {
        self.entries.insert(instance, (now, status));
    }

    pub fn forget(&mut self, instance: InstanceId) {
        self.entries.remove(&instance);
    }

    pub fn last_report(&self, instance: InstanceId) -> Option<f64> {
        self.entries.get(&instance).map(|e| e.0)
    }

    pub fn status(&self, instance: InstanceId, now: f64, timing: &ControlTiming) -> Option<HealthStatus> {
        self.entries.get(&instance).map(|&(last, status)| {
            if now - last > timing.missing_after() {
                HealthStatus::Missing
            } else {
                status
            }
        })
    }

    /// Instances currently reporting a fault or missing.
    pub fn unhealthy(&self, now: f64, timing: &ControlTiming) -> Vec<(InstanceId, HealthStatus)> {
        self.entries
            .keys()
            .filter_map(|&id| match self.status(id, now, timing) {
                Some(HealthStatus::Ok) | None => None,
                Some(s) => Some((id, s)),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultLevel {
    /// Process-level fault; the instance restarts on its own container.
    RecoverableInPlace,
    /// Device-level fault; the instance must be replaced.
    SubstituteRequired,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FaultEvent {
    pub instance: InstanceId,
    pub level: FaultLevel,
    pub detected_at: f64,
    pub recoverable: bool,
}

impl FaultEvent {
    pub fn new(instance: InstanceId, level: FaultLevel, detected_at: f64) -> Self {
        Self {
            instance,
            level,
            detected_at,
            recoverable: level == FaultLevel::RecoverableInPlace,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkflowKind {
    Setup,
    AddMembers,
    Recovery,
    Restart,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranscriptStep {
    pub at: f64,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pending,
    Completed,
    Aborted { reason: String },
    NoOp,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transcript {
    pub kind: WorkflowKind,
    pub group: String,
    pub started: f64,
    pub finished: Option<f64>,
    pub steps: Vec<TranscriptStep>,
    pub containers_added: u32,
    pub outcome: Outcome,
    pub fault: Option<FaultEvent>,
}

impl Transcript {
    fn new(kind: WorkflowKind, group: &str, started: f64) -> Self {
        Self {
            kind,
            group: group.to_string(),
            started,
            finished: None,
            steps: Vec::new(),
            containers_added: 0,
            outcome: Outcome::Pending,
            fault: None,
        }
    }

    fn step(&mut self, at: f64, action: impl Into<String>) {
        self.steps.push(TranscriptStep { at, action: action.into() });
    }
}

/// A workflow whose membership change lands at `finish_at`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PendingWorkflow {
    pub id: WorkflowId,
    pub finish_at: f64,
    pub transcript: Transcript,
    /// Instances that become active on completion.
    pub additions: Vec<(InstanceId, Role, ContainerId)>,
}

/// Result of applying a finished workflow.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Completion {
    pub transcript: Transcript,
    pub activated: Vec<(InstanceId, Role)>,
    pub erased: Vec<InstanceId>,
    /// Snapshot to propagate to peers, if membership changed.
    pub view: Option<GroupView>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RecoveryStart {
    /// Substitute is being set up.
    Started(PendingWorkflow),
    /// No free container; waits for one. The fault is logically removed.
    Parked { view: GroupView },
    /// Instance restarting in place.
    Restarting(PendingWorkflow),
    /// Fault in a removed group or on an unknown instance.
    NoOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum PlanStep {
    Remove { instance: InstanceId },
    Add { role: Role },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustPolicy {
    ProfileDriven,
    MonitorDriven,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RatioPlan {
    pub policy: AdjustPolicy,
    pub steps: Vec<PlanStep>,
}

/// Monitor signals over one observation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonitorSample {
    pub e2e: f64,
    /// `T_p / E2E`.
    pub tp_share: f64,
}

/// Role to add when E2E latency rises: prefill if the prefill share of E2E
/// grew, decode if it shrank. `None` when latency is stable or the shift is
/// below `share_tolerance`.
pub fn monitor_decision(
    prev: MonitorSample,
    cur: MonitorSample,
    e2e_tolerance: f64,
    share_tolerance: f64,
) -> Option<Role> {
    if !(cur.e2e > prev.e2e * (1.0 + e2e_tolerance)) {
        return None;
    }
    let shift = cur.tp_share - prev.tp_share;
    if shift > share_tolerance {
        Some(Role::Prefill)
    } else if shift < -share_tolerance {
        Some(Role::Decode)
    } else {
        None
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Alert {
    pub at: f64,
    pub group: String,
    pub message: String,
}

/// Desired group composition for [`Registry::begin_setup`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub name: String,
    pub service: String,
    pub scenarios: BTreeSet<String>,
    pub n_prefill: u32,
    pub n_decode: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct Registry {
    timing: ControlTiming,
    containers: BTreeMap<ContainerId, Container>,
    groups: BTreeMap<String, GroupRecord>,
    pending: BTreeMap<WorkflowId, PendingWorkflow>,
    parked: VecDeque<(String, FaultEvent, Role, Transcript)>,
    next_instance: u32,
    next_workflow: u64,
    pub health: HealthLedger,
    pub alerts: Vec<Alert>,
    pub transcripts: Vec<Transcript>,
}

impl Registry {
    /// Creates a registry over `num_containers` stateless containers with
    /// `devices_per_container` endpoints each.
    pub fn new(timing: ControlTiming, num_containers: u32, devices_per_container: u32) -> Result<Self, ControlError> {
        timing.validate()?;
        let containers = (0..num_containers)
            .map(|c| {
                let id = ContainerId(c);
                let endpoints = (0..devices_per_container).map(|d| format!("c{c}/d{d}")).collect();
                (
                    id,
                    Container {
                        id,
                        endpoints,
                        reachable: true,
                        state: ContainerState::Free,
                    },
                )
            })
            .collect();
        Ok(Self {
            timing,
            containers,
            groups: BTreeMap::new(),
            pending: BTreeMap::new(),
            parked: VecDeque::new(),
            next_instance: 0,
            next_workflow: 0,
            health: HealthLedger::default(),
            alerts: Vec::new(),
            transcripts: Vec::new(),
        })
    }

    pub fn timing(&self) -> &ControlTiming {
        &self.timing
    }

    pub fn group(&self, name: &str) -> Result<&GroupRecord, ControlError> {
        self.groups.get(name).ok_or_else(|| ControlError::UnknownGroup(name.to_string()))
    }

    fn group_mut(&mut self, name: &str) -> Result<&mut GroupRecord, ControlError> {
        self.groups
            .get_mut(name)
            .ok_or_else(|| ControlError::UnknownGroup(name.to_string()))
    }

    pub fn groups(&self) -> impl Iterator<Item = &GroupRecord> {
        self.groups.values()
    }

    pub fn containers(&self) -> impl Iterator<Item = &Container> {
        self.containers.values()
    }

    pub fn set_reachable(&mut self, id: ContainerId, reachable: bool) {
        if let Some(c) = self.containers.get_mut(&id) {
            c.reachable = reachable;
        }
    }

    pub fn free_containers(&self) -> usize {
        self.containers
            .values()
            .filter(|c| c.state == ContainerState::Free)
            .count()
    }

    pub fn parked_recoveries(&self) -> usize {
        self.parked.len()
    }

    pub fn pending_workflows(&self) -> usize {
        self.pending.len()
    }

    /// Group and member record for an instance.
    pub fn locate(&self, instance: InstanceId) -> Option<(&GroupRecord, &Member)> {
        self.groups
            .values()
            .find_map(|g| g.members.get(&instance).map(|m| (g, m)))
    }

    pub fn view(&self, name: &str) -> Result<GroupView, ControlError> {
        let g = self.group(name)?;
        let (prefills, decodes) = if g.state.is_active() {
            (
                g.active(Role::Prefill).map(|m| m.instance).collect(),
                g.active(Role::Decode).map(|m| m.instance).collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(GroupView {
            group: g.name.clone(),
            version: g.meta_version,
            scenarios: g.scenarios.clone(),
            prefills,
            decodes,
        })
    }

    /// Checks that every endpoint is owned by at most one container.
    pub fn check_endpoints(&self) -> Result<(), ControlError> {
        let mut seen = BTreeSet::new();
        for c in self.containers.values() {
            for e in &c.endpoints {
                if !seen.insert(e.as_str()) {
                    return Err(ControlError::DuplicateEndpoint(e.clone()));
                }
            }
        }
        Ok(())
    }

    fn take_containers(&mut self, n: usize) -> Result<Vec<ContainerId>, ControlError> {
        let free: Vec<ContainerId> = self
            .containers
            .values()
            .filter(|c| c.state == ContainerState::Free)
            .map(|c| c.id)
            .take(n)
            .collect();
        if free.len() < n {
            return Err(ControlError::InsufficientContainers {
                needed: n,
                available: free.len(),
            });
        }
        for id in &free {
            self.containers.get_mut(id).expect("listed").state = ContainerState::Reserved;
        }
        Ok(free)
    }

    fn free_reserved(&mut self, ids: impl IntoIterator<Item = ContainerId>) {
        for id in ids {
            if let Some(c) = self.containers.get_mut(&id) {
                if c.state == ContainerState::Reserved {
                    c.state = ContainerState::Free;
                }
            }
        }
    }

    fn new_instance(&mut self) -> InstanceId {
        let id = InstanceId(self.next_instance);
        self.next_instance += 1;
        id
    }

    fn new_workflow(&mut self) -> WorkflowId {
        let id = WorkflowId(self.next_workflow);
        self.next_workflow += 1;
        id
    }

    fn all_reachable(&self, ids: &[ContainerId]) -> bool {
        ids.iter().all(|id| self.containers[id].reachable)
    }

    /// Creates a group whose members are active immediately, for the initial
    /// deployment of a run.
    pub fn bootstrap_group(&mut self, spec: &GroupSpec, now: f64) -> Result<GroupView, ControlError> {
        if self.groups.contains_key(&spec.name) {
            return Err(ControlError::DuplicateGroup(spec.name.clone()));
        }
        let n = (spec.n_prefill + spec.n_decode) as usize;
        let ids = self.take_containers(n)?;
        let mut record = GroupRecord {
            name: spec.name.clone(),
            service: spec.service.clone(),
            scenarios: spec.scenarios.clone(),
            members: BTreeMap::new(),
            state: GroupState::Healthy,
            meta_version: 1,
        };
        for (i, cid) in ids.into_iter().enumerate() {
            let role = if (i as u32) < spec.n_prefill { Role::Prefill } else { Role::Decode };
            let instance = self.new_instance();
            self.attach(&mut record, instance, role, cid, MemberState::Active);
            self.health.report(instance, now, HealthStatus::Ok);
        }
        self.groups.insert(spec.name.clone(), record);
        self.view(&spec.name)
    }

    fn attach(&mut self, record: &mut GroupRecord, instance: InstanceId, role: Role, cid: ContainerId, state: MemberState) {
        let c = self.containers.get_mut(&cid).expect("reserved container");
        c.state = ContainerState::Assigned { instance };
        record.members.insert(
            instance,
            Member {
                instance,
                role,
                container: cid,
                endpoints: c.endpoints.clone(),
                state,
                removed_at: None,
            },
        );
    }

    /// Six-step setup: collect endpoint reports, init, connect, load models,
    /// first health report, confirm and label prefills as entrances.
    pub fn begin_setup<R: Rng + ?Sized>(
        &mut self,
        spec: &GroupSpec,
        now: f64,
        rng: &mut R,
    ) -> Result<PendingWorkflow, ControlError> {
        if spec.n_prefill == 0 || spec.n_decode == 0 {
            return Err(ControlError::InvalidTarget);
        }
        if let Some(g) = self.groups.get(&spec.name) {
            if g.state != GroupState::Removed {
                return Err(ControlError::DuplicateGroup(spec.name.clone()));
            }
        }
        let n = (spec.n_prefill + spec.n_decode) as usize;
        let ids = self.take_containers(n)?;
        let roles: Vec<Role> = (0..n)
            .map(|i| if (i as u32) < spec.n_prefill { Role::Prefill } else { Role::Decode })
            .collect();
        let old_version = self.groups.get(&spec.name).map_or(0, |g| g.meta_version);
        let mut record = GroupRecord {
            name: spec.name.clone(),
            service: spec.service.clone(),
            scenarios: spec.scenarios.clone(),
            members: BTreeMap::new(),
            state: GroupState::Collecting,
            meta_version: old_version,
        };
        let mut tr = Transcript::new(WorkflowKind::Setup, &spec.name, now);
        let reachable = self.all_reachable(&ids);
        let t = self.timing;

        // 1. Collect endpoint reports, retrying within the threshold.
        let mut clock = now;
        let mut collected = false;
        for attempt in 0..=t.collect_retries {
            let slowest = ids.iter().map(|_| t.report_delay.sample(rng)).fold(0.0, f64::max);
            if reachable && slowest <= t.collect_timeout {
                clock += slowest;
                tr.step(clock, format!("collect: {n} endpoint reports"));
                collected = true;
                break;
            }
            clock += t.collect_timeout;
            tr.step(clock, format!("collect: timeout on attempt {}", attempt + 1));
        }
        if !collected {
            return Ok(self.aborted(tr, record, ids, clock, "collection timeout"));
        }

        // 2. Init, 3. connect.
        record.state = GroupState::Initializing;
        clock += t.init_time;
        tr.step(clock, "init issued");
        let connect = ids.iter().map(|_| t.connect_time.sample(rng)).fold(0.0, f64::max);
        if connect > t.connect_timeout {
            clock += t.connect_timeout;
            tr.step(clock, "connect: timeout");
            return Ok(self.aborted(tr, record, ids, clock, "connection timeout"));
        }
        clock += connect;
        tr.step(clock, format!("connect: {} links", n * (n - 1) / 2));

        // 4. Role-specific model load.
        let load = roles.iter().map(|&r| t.load(r).sample(rng)).fold(0.0, f64::max);
        clock += load;
        tr.step(clock, "model loaded");

        // 5. First health report, 6. confirm.
        clock += t.first_report;
        tr.step(clock, "first health report");
        tr.step(clock, format!("confirmed; {} prefills labeled as entrance", spec.n_prefill));
        tr.containers_added = n as u32;

        let mut additions = Vec::with_capacity(n);
        for (&cid, &role) in ids.iter().zip(&roles) {
            let instance = self.new_instance();
            self.attach(&mut record, instance, role, cid, MemberState::Loading);
            additions.push((instance, role, cid));
        }
        self.groups.insert(spec.name.clone(), record);
        let id = self.new_workflow();
        let wf = PendingWorkflow {
            id,
            finish_at: clock,
            transcript: tr,
            additions,
        };
        self.pending.insert(id, wf.clone());
        Ok(wf)
    }

    fn aborted(
        &mut self,
        mut tr: Transcript,
        record: GroupRecord,
        ids: Vec<ContainerId>,
        at: f64,
        reason: &str,
    ) -> PendingWorkflow {
        self.free_reserved(ids);
        tr.finished = Some(at);
        tr.outcome = Outcome::Aborted { reason: reason.to_string() };
        self.alerts.push(Alert {
            at,
            group: record.name.clone(),
            message: format!("setup aborted: {reason}"),
        });
        if !self.groups.contains_key(&record.name) {
            self.groups.insert(record.name.clone(), record);
        } else if let Some(g) = self.groups.get_mut(&record.name) {
            g.state = record.state;
        }
        self.transcripts.push(tr.clone());
        let id = self.new_workflow();
        PendingWorkflow {
            id,
            finish_at: at,
            transcript: tr,
            additions: Vec::new(),
        }
    }

    /// Three-step scale-out: connect and confirm, load and report, push the
    /// updated decode map to prefills.
    pub fn begin_add<R: Rng + ?Sized>(
        &mut self,
        group: &str,
        role: Role,
        count: u32,
        now: f64,
        rng: &mut R,
    ) -> Result<PendingWorkflow, ControlError> {
        self.begin_add_inner(group, role, count, now, rng, WorkflowKind::AddMembers, None)
    }

    #[allow(clippy::too_many_arguments)]
    fn begin_add_inner<R: Rng + ?Sized>(
        &mut self,
        group: &str,
        role: Role,
        count: u32,
        now: f64,
        rng: &mut R,
        kind: WorkflowKind,
        prefix: Option<Transcript>,
    ) -> Result<PendingWorkflow, ControlError> {
        let state = self.group(group)?.state;
        if !state.is_active() {
            return Err(ControlError::InvalidState {
                group: group.to_string(),
                state,
            });
        }
        let ids = self.take_containers(count as usize)?;
        let t = self.timing;
        let mut tr = prefix.unwrap_or_else(|| Transcript::new(kind, group, now));
        let connect = ids.iter().map(|_| t.connect_time.sample(rng)).fold(0.0, f64::max);
        if !self.all_reachable(&ids) || connect > t.connect_timeout {
            let at = now + t.connect_timeout;
            tr.step(at, "connect: failed, containers discarded");
            tr.finished = Some(at);
            tr.outcome = Outcome::Aborted {
                reason: "connection failure".into(),
            };
            self.free_reserved(ids);
            self.transcripts.push(tr.clone());
            let id = self.new_workflow();
            return Ok(PendingWorkflow {
                id,
                finish_at: at,
                transcript: tr,
                additions: Vec::new(),
            });
        }
        let mut clock = now + connect;
        tr.step(clock, format!("connect: {count} new {role:?} containers confirmed"));
        clock += t.load(role).sample(rng) + t.first_report;
        tr.step(clock, "model loaded and health reported");
        tr.step(clock, "meta update to peers");
        tr.containers_added += count;
        let mut additions = Vec::new();
        let mut record = self.groups.remove(group).expect("checked");
        for cid in ids {
            let instance = self.new_instance();
            self.attach(&mut record, instance, role, cid, MemberState::Loading);
            additions.push((instance, role, cid));
        }
        self.groups.insert(group.to_string(), record);
        let id = self.new_workflow();
        let wf = PendingWorkflow {
            id,
            finish_at: clock,
            transcript: tr,
            additions,
        };
        self.pending.insert(id, wf.clone());
        Ok(wf)
    }

    /// Applies a workflow at its finish time.
    pub fn complete(&mut self, id: WorkflowId, now: f64) -> Result<Completion, ControlError> {
        let wf = self.pending.remove(&id).ok_or(ControlError::UnknownWorkflow(id.0))?;
        let mut tr = wf.transcript;
        let name = tr.group.clone();
        let kind = tr.kind;
        let mut erased = Vec::new();
        let mut activated = Vec::new();
        {
            let g = self.groups.get_mut(&name).ok_or_else(|| ControlError::UnknownGroup(name.clone()))?;
            for &(instance, role, _) in &wf.additions {
                if let Some(m) = g.members.get_mut(&instance) {
                    m.state = MemberState::Active;
                    activated.push((instance, role));
                }
            }
            match kind {
                WorkflowKind::Setup => g.state = GroupState::Healthy,
                WorkflowKind::Recovery => {
                    if let Some(f) = tr.fault {
                        if g.members.remove(&f.instance).is_some() {
                            erased.push(f.instance);
                        }
                    }
                }
                WorkflowKind::Restart => {
                    if let Some(f) = tr.fault {
                        if let Some(m) = g.members.get_mut(&f.instance) {
                            m.state = MemberState::Active;
                            m.removed_at = None;
                            activated.push((f.instance, m.role));
                        }
                    }
                }
                WorkflowKind::AddMembers => {}
            }
            // Members landing in a group that is being drained drain too.
            if g.state == GroupState::Draining {
                for &(instance, _) in &activated {
                    if let Some(m) = g.members.get_mut(&instance) {
                        m.state = MemberState::Draining;
                        m.removed_at = Some(now);
                    }
                }
                activated.clear();
            }
            g.bump();
        }
        for &e in &erased {
            self.health.forget(e);
        }
        for &(instance, _) in &activated {
            self.health.report(instance, now, HealthStatus::Ok);
        }
        if kind == WorkflowKind::Recovery {
            tr.step(now, "fault instance state erased");
        }
        self.refresh_state(&name);
        tr.finished = Some(now);
        tr.outcome = Outcome::Completed;
        self.transcripts.push(tr.clone());
        Ok(Completion {
            transcript: tr,
            activated,
            erased,
            view: Some(self.view(&name)?),
        })
    }

    fn refresh_state(&mut self, name: &str) {
        let parked = self.parked.iter().any(|p| p.0 == name);
        let recovering = self
            .pending
            .values()
            .any(|w| w.transcript.group == name && matches!(w.transcript.kind, WorkflowKind::Recovery | WorkflowKind::Restart));
        if let Some(g) = self.groups.get_mut(name) {
            if g.state.is_active() {
                g.state = if parked || recovering {
                    GroupState::Degraded
                } else {
                    GroupState::Healthy
                };
            }
        }
    }

    /// Logically removes instances: they get no new traffic and drain.
    /// Refuses to leave an active group without a prefill or a decode.
    pub fn remove_members(&mut self, group: &str, instances: &[InstanceId], now: f64) -> Result<GroupView, ControlError> {
        let g = self.group(group)?;
        for &i in instances {
            match g.members.get(&i) {
                Some(m) if m.state == MemberState::Active => {}
                _ => return Err(ControlError::NotMember(i.0, group.to_string())),
            }
        }
        if g.state.is_active() {
            for role in [Role::Prefill, Role::Decode] {
                let removing = instances.iter().filter(|i| g.members[i].role == role).count();
                if removing > 0 && g.active_count(role) <= removing {
                    return Err(ControlError::LastOfRole {
                        group: group.to_string(),
                        role,
                    });
                }
            }
        }
        let g = self.group_mut(group)?;
        for i in instances {
            let m = g.members.get_mut(i).expect("checked");
            m.state = MemberState::Draining;
            m.removed_at = Some(now);
        }
        g.bump();
        self.view(group)
    }

    /// Releases a drained (or faulted) member's container back to the pool.
    pub fn release_member(&mut self, instance: InstanceId) -> Result<(), ControlError> {
        let name = self
            .locate(instance)
            .map(|(g, _)| g.name.clone())
            .ok_or(ControlError::NotMember(instance.0, String::new()))?;
        let g = self.groups.get_mut(&name).expect("located");
        let m = g.members.remove(&instance).expect("located");
        if let Some(c) = self.containers.get_mut(&m.container) {
            if matches!(c.state, ContainerState::Assigned { .. }) {
                c.state = ContainerState::Free;
            }
        }
        self.health.forget(instance);
        if g.state == GroupState::Draining && g.members.is_empty() {
            g.state = GroupState::Removed;
            g.bump();
        }
        Ok(())
    }

    /// Takes a whole group out of service: every member drains.
    pub fn drain_group(&mut self, group: &str, now: f64) -> Result<Vec<InstanceId>, ControlError> {
        let g = self.group_mut(group)?;
        if !g.state.is_active() {
            return Err(ControlError::InvalidState {
                group: group.to_string(),
                state: g.state,
            });
        }
        g.state = GroupState::Draining;
        let mut ids = Vec::new();
        for m in g.members.values_mut() {
            if m.removed_at.is_none() {
                m.removed_at = Some(now);
            }
            if m.state != MemberState::Faulted {
                m.state = MemberState::Draining;
            }
            ids.push(m.instance);
        }
        g.bump();
        if g.members.is_empty() {
            g.state = GroupState::Removed;
        }
        Ok(ids)
    }

    /// Starts handling a detected fault.
    pub fn begin_recovery<R: Rng + ?Sized>(
        &mut self,
        fault: FaultEvent,
        now: f64,
        rng: &mut R,
    ) -> Result<RecoveryStart, ControlError> {
        let Some((g, m)) = self.locate(fault.instance) else {
            return Ok(RecoveryStart::NoOp);
        };
        if !g.state.is_active() || m.state != MemberState::Active {
            return Ok(RecoveryStart::NoOp);
        }
        let name = g.name.clone();
        let role = m.role;
        let cid = m.container;

        let kind = match fault.level {
            FaultLevel::RecoverableInPlace => WorkflowKind::Restart,
            FaultLevel::SubstituteRequired => WorkflowKind::Recovery,
        };
        let mut tr = Transcript::new(kind, &name, now);
        tr.fault = Some(fault);
        {
            let g = self.groups.get_mut(&name).expect("located");
            let m = g.members.get_mut(&fault.instance).expect("located");
            m.state = MemberState::Faulted;
            m.removed_at = Some(now);
            g.bump();
        }
        tr.step(now, format!("instance {} logically removed", fault.instance.0));
        tr.step(now, "meta pushed to group peers");

        if kind == WorkflowKind::Restart {
            let at = now + self.timing.restart_time;
            tr.step(at, "restarted in place");
            let id = self.new_workflow();
            let wf = PendingWorkflow {
                id,
                finish_at: at,
                transcript: tr,
                additions: Vec::new(),
            };
            self.pending.insert(id, wf.clone());
            self.refresh_state(&name);
            return Ok(RecoveryStart::Restarting(wf));
        }

        if let Some(c) = self.containers.get_mut(&cid) {
            c.state = ContainerState::Faulted {
                until: now + self.timing.repair_time,
            };
        }
        if self.free_containers() == 0 {
            self.alerts.push(Alert {
                at: now,
                group: name.clone(),
                message: format!("no free container to replace instance {}", fault.instance.0),
            });
            tr.step(now, "no free container; waiting");
            self.parked.push_back((name.clone(), fault, role, tr));
            self.refresh_state(&name);
            return Ok(RecoveryStart::Parked { view: self.view(&name)? });
        }
        let wf = self.begin_add_inner(&name, role, 1, now, rng, WorkflowKind::Recovery, Some(tr))?;
        self.refresh_state(&name);
        Ok(RecoveryStart::Started(wf))
    }

    /// Returns repaired containers whose repair time has passed to the pool.
    pub fn repair_containers(&mut self, now: f64) -> usize {
        let mut n = 0;
        for c in self.containers.values_mut() {
            if let ContainerState::Faulted { until } = c.state {
                if until <= now {
                    c.state = ContainerState::Free;
                    n += 1;
                }
            }
        }
        n
    }

    /// Earliest time a faulted container comes back.
    pub fn next_repair(&self) -> Option<f64> {
        self.containers
            .values()
            .filter_map(|c| match c.state {
                ContainerState::Faulted { until } => Some(until),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Starts parked recoveries while free containers exist.
    pub fn resume_parked<R: Rng + ?Sized>(&mut self, now: f64, rng: &mut R) -> Vec<PendingWorkflow> {
        let mut started = Vec::new();
        while self.free_containers() > 0 {
            let Some((name, _fault, role, mut tr)) = self.parked.pop_front() else { break };
            let active = self.groups.get(&name).is_some_and(|g| g.state.is_active());
            if !active {
                tr.finished = Some(now);
                tr.outcome = Outcome::NoOp;
                self.transcripts.push(tr);
                continue;
            }
            tr.step(now, "free container available; resuming");
            match self.begin_add_inner(&name, role, 1, now, rng, WorkflowKind::Recovery, Some(tr)) {
                Ok(wf) => started.push(wf),
                Err(_) => break,
            }
            self.refresh_state(&name);
        }
        started
    }

    /// Step plan from the current active composition to `target`. Removals
    /// come first so their containers can be reused.
    pub fn adjust_ratio(
        &self,
        group: &str,
        target: &ClusterShape,
        policy: AdjustPolicy,
    ) -> Result<RatioPlan, ControlError> {
        if target.n_prefill == 0 || target.n_decode == 0 {
            return Err(ControlError::InvalidTarget);
        }
        let g = self.group(group)?;
        let mut removes = Vec::new();
        let mut adds = Vec::new();
        for (role, want) in [(Role::Prefill, target.n_prefill), (Role::Decode, target.n_decode)] {
            let members: Vec<InstanceId> = g.active(role).map(|m| m.instance).collect();
            let have = members.len() as u32;
            if want < have {
                // Newest instances go first.
                for &i in members.iter().rev().take((have - want) as usize) {
                    removes.push(PlanStep::Remove { instance: i });
                }
            } else {
                adds.extend((have..want).map(|_| PlanStep::Add { role }));
            }
        }
        let available = self.free_containers() + removes.len();
        if adds.len() > available {
            return Err(ControlError::InsufficientContainers {
                needed: adds.len(),
                available,
            });
        }
        removes.extend(adds);
        Ok(RatioPlan { policy, steps: removes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(name: &str, p: u32, d: u32) -> GroupSpec {
        GroupSpec {
            name: name.into(),
            service: "svc".into(),
            scenarios: ["chat".to_string()].into(),
            n_prefill: p,
            n_decode: d,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn setup_one_plus_one() {
        let mut r = Registry::new(ControlTiming::default(), 4, 8).unwrap();
        let wf = r.begin_setup(&spec("g", 1, 1), 0.0, &mut rng()).unwrap();
        assert_eq!(r.group("g").unwrap().state, GroupState::Initializing);
        assert_eq!(wf.transcript.steps.len(), 6);
        let done = r.complete(wf.id, wf.finish_at).unwrap();
        let g = r.group("g").unwrap();
        assert_eq!(g.state, GroupState::Healthy);
        assert_eq!(g.meta_version, 1);
        assert_eq!(done.activated.len(), 2);
        let view = done.view.unwrap();
        assert_eq!((view.prefills.len(), view.decodes.len()), (1, 1));
        r.check_endpoints().unwrap();
    }

    #[test]
    fn unreachable_container_aborts_after_retries() {
        let t = ControlTiming::default();
        let mut r = Registry::new(t, 2, 8).unwrap();
        r.set_reachable(ContainerId(1), false);
        let wf = r.begin_setup(&spec("g", 1, 1), 0.0, &mut rng()).unwrap();
        assert!(matches!(wf.transcript.outcome, Outcome::Aborted { .. }));
        assert_eq!(wf.transcript.steps.len() as u32, t.collect_retries + 1);
        assert!((wf.finish_at - t.collect_timeout * f64::from(t.collect_retries + 1)).abs() < 1e-9);
        assert_eq!(r.group("g").unwrap().state, GroupState::Collecting);
        assert_eq!(r.free_containers(), 2);
        assert_eq!(r.alerts.len(), 1);
    }

    #[test]
    fn model_load_differs_by_role() {
        let t = ControlTiming::default();
        assert_ne!(t.load(Role::Prefill), t.load(Role::Decode));
        let sfs = ControlTiming {
            model_store: ModelStore::Sfs,
            ..t
        };
        assert!(sfs.load(Role::Prefill).mean() > t.load(Role::Prefill).mean());
    }

    #[test]
    fn add_decode_visible_only_after_completion() {
        let mut r = Registry::new(ControlTiming::default(), 4, 8).unwrap();
        r.bootstrap_group(&spec("g", 1, 1), 0.0).unwrap();
        let wf = r.begin_add("g", Role::Decode, 1, 10.0, &mut rng()).unwrap();
        assert_eq!(r.view("g").unwrap().decodes.len(), 1);
        let done = r.complete(wf.id, wf.finish_at).unwrap();
        assert_eq!(done.view.unwrap().decodes.len(), 2);
        assert_eq!(r.group("g").unwrap().meta_version, 2);
    }

    #[test]
    fn add_to_removed_group_fails() {
        let mut r = Registry::new(ControlTiming::default(), 4, 8).unwrap();
        r.bootstrap_group(&spec("g", 1, 1), 0.0).unwrap();
        for i in r.drain_group("g", 1.0).unwrap() {
            r.release_member(i).unwrap();
        }
        assert_eq!(r.group("g").unwrap().state, GroupState::Removed);
        assert!(matches!(
            r.begin_add("g", Role::Decode, 1, 2.0, &mut rng()),
            Err(ControlError::InvalidState { .. })
        ));
    }

    #[test]
    fn remove_guard_and_scale_in() {
        let mut r = Registry::new(ControlTiming::default(), 4, 8).unwrap();
        let v = r.bootstrap_group(&spec("g", 2, 1), 0.0).unwrap();
        assert!(matches!(
            r.remove_members("g", &v.decodes, 1.0),
            Err(ControlError::LastOfRole { role: Role::Decode, .. })
        ));
        let before = r.group("g").unwrap().meta_version;
        let view = r.remove_members("g", &v.prefills[..1], 1.0).unwrap();
        assert_eq!(view.prefills, v.prefills[1..].to_vec());
        assert_eq!(r.group("g").unwrap().meta_version, before + 1);
        r.release_member(v.prefills[0]).unwrap();
        assert_eq!(r.free_containers(), 2);
    }

    #[test]
    fn ratio_plans() {
        let mut r = Registry::new(ControlTiming::default(), 4, 8).unwrap();
        r.bootstrap_group(&spec("g", 2, 2), 0.0).unwrap();
        let same = ClusterShape::new(2, 2, 1, 1).unwrap();
        assert!(r.adjust_ratio("g", &same, AdjustPolicy::ProfileDriven).unwrap().steps.is_empty());
        let target = ClusterShape::new(1, 3, 1, 1).unwrap();
        let plan = r.adjust_ratio("g", &target, AdjustPolicy::MonitorDriven).unwrap().steps;
        assert_eq!(plan.len(), 2);
        assert!(matches!(plan[0], PlanStep::Remove { .. }));
        assert_eq!(plan[1], PlanStep::Add { role: Role::Decode });
        let big = ClusterShape::new(4, 4, 1, 1).unwrap();
        assert!(matches!(
            r.adjust_ratio("g", &big, AdjustPolicy::ProfileDriven),
            Err(ControlError::InsufficientContainers { .. })
        ));
    }

    #[test]
    fn monitor_rule() {
        let prev = MonitorSample { e2e: 10.0, tp_share: 0.3 };
        let up_dec = MonitorSample { e2e: 12.0, tp_share: 0.2 };
        let up_inc = MonitorSample { e2e: 12.0, tp_share: 0.4 };
        assert_eq!(monitor_decision(prev, up_dec, 0.05, 0.02), Some(Role::Decode));
        assert_eq!(monitor_decision(prev, up_inc, 0.05, 0.02), Some(Role::Prefill));
        assert_eq!(monitor_decision(prev, prev, 0.05, 0.02), None);
    }

    #[test]
    fn recovery_adds_exactly_one_container() {
        let mut r = Registry::new(ControlTiming::default(), 3, 8).unwrap();
        let v = r.bootstrap_group(&spec("g", 1, 1), 0.0).unwrap();
        let fault = FaultEvent::new(v.decodes[0], FaultLevel::SubstituteRequired, 30.0);
        let RecoveryStart::Started(wf) = r.begin_recovery(fault, 30.0, &mut rng()).unwrap() else {
            panic!("expected substitution");
        };
        assert_eq!(r.view("g").unwrap().decodes.len(), 0);
        assert_eq!(r.group("g").unwrap().state, GroupState::Degraded);
        let done = r.complete(wf.id, wf.finish_at).unwrap();
        assert_eq!(done.transcript.containers_added, 1);
        assert_eq!(done.erased, vec![v.decodes[0]]);
        assert_eq!(r.group("g").unwrap().state, GroupState::Healthy);
        assert_eq!(done.view.unwrap().decodes.len(), 1);
    }

    #[test]
    fn recovery_parks_without_free_container() {
        let mut r = Registry::new(ControlTiming::default(), 2, 8).unwrap();
        let v = r.bootstrap_group(&spec("g", 1, 1), 0.0).unwrap();
        let fault = FaultEvent::new(v.prefills[0], FaultLevel::SubstituteRequired, 5.0);
        assert!(matches!(r.begin_recovery(fault, 5.0, &mut rng()).unwrap(), RecoveryStart::Parked { .. }));
        assert_eq!(r.alerts.len(), 1);
        assert!(r.resume_parked(6.0, &mut rng()).is_empty());
        let repair = r.next_repair().unwrap();
        assert_eq!(r.repair_containers(repair), 1);
        let started = r.resume_parked(repair, &mut rng());
        assert_eq!(started.len(), 1);
        let done = r.complete(started[0].id, started[0].finish_at).unwrap();
        assert_eq!(done.transcript.containers_added, 1);
    }

    #[test]
    fn fault_in_removed_group_is_noop() {
        let mut r = Registry::new(ControlTiming::default(), 2, 8).unwrap();
        let v = r.bootstrap_group(&spec("g", 1, 1), 0.0).unwrap();
        r.drain_group("g", 1.0).unwrap();
        let fault = FaultEvent::new(v.prefills[0], FaultLevel::SubstituteRequired, 2.0);
        assert_eq!(r.begin_recovery(fault, 2.0, &mut rng()).unwrap(), RecoveryStart::NoOp);
    }

    #[test]
    fn health_missing_after_threshold() {
        let t = ControlTiming::default();
        let mut h = HealthLedger::default();
        h.report(InstanceId(0), 0.0, HealthStatus::Ok);
        assert_eq!(h.status(InstanceId(0), 30.0, &t), Some(HealthStatus::Ok));
        assert_eq!(h.status(InstanceId(0), 30.1, &t), Some(HealthStatus::Missing));
        assert_eq!(h.unhealthy(31.0, &t).len(), 1);
    }
}
