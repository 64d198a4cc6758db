//! Mock prefill and decode engines.
//!
//! Instances hold state and compute latencies; the cluster turns the returned
//! times into engine events.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perf_model::{PerfError, PerfProfile};
use crate::workload::{PrefixId, RequestId, ScenarioId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InstanceError {
    #[error("batch of {size} exceeds max batch {max}")]
    BatchOverflow { size: usize, max: u32 },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("instance is busy")]
    Busy,
    #[error("instance is not executing a batch")]
    NotBusy,
    #[error("request {0} holds no slot on this instance")]
    NoSlot(u64),
    #[error("request {0} has no reservation on this instance")]
    NoReservation(u64),
    #[error("decode instance has nothing running")]
    Idle,
    #[error("no profile for scenario {0}")]
    MissingProfile(u32),
    #[error(transparent)]
    Perf(#[from] PerfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceId(pub u32);

/// Per-scenario profiles indexed by `ScenarioId`.
pub type Profiles = [Option<PerfProfile>];

fn profile(profiles: &Profiles, scenario: ScenarioId) -> Result<&PerfProfile, InstanceError> {
    profiles
        .get(scenario.0 as usize)
        .and_then(Option::as_ref)
        .ok_or(InstanceError::MissingProfile(scenario.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CacheEntry {
    pub len: u32,
    pub size: u64,
    pub last_used: f64,
}

/// LRU prefix cache bounded by an HBM byte budget.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixCache {
    hbm_budget: u64,
    used: u64,
    entries: BTreeMap<PrefixId, CacheEntry>,
    hits: u64,
    misses: u64,
}

impl PrefixCache {
    pub fn new(hbm_budget: u64) -> Self {
        Self {
            hbm_budget,
            used: 0,
            entries: BTreeMap::new(),
            hits: 0,
            misses: 0,
        }
    }

    pub fn budget(&self) -> u64 {
        self.hbm_budget
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn entries(&self) -> &BTreeMap<PrefixId, CacheEntry> {
        &self.entries
    }

    pub fn contains(&self, prefix: PrefixId) -> bool {
        self.entries.contains_key(&prefix)
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    /// Records a use of `prefix`. Returns whether it was cached. A miss
    /// inserts the prefix, evicting least-recently-used entries as needed;
    /// prefixes larger than the whole budget are never cached.
    pub fn access(&mut self, prefix: PrefixId, len: u32, size: u64, now: f64) -> bool {
        if let Some(e) = self.entries.get_mut(&prefix) {
            e.last_used = now;
            self.hits += 1;
            return true;
        }
        self.misses += 1;
        if size > self.hbm_budget {
            return false;
        }
        while self.used + size > self.hbm_budget {
            let (&victim, _) = self
                .entries
                .iter()
                .min_by(|a, b| a.1.last_used.total_cmp(&b.1.last_used).then(a.0.cmp(b.0)))
                .expect("used > 0 implies an entry");
            let e = self.entries.remove(&victim).expect("present");
            self.used -= e.size;
        }
        self.entries.insert(prefix, CacheEntry { len, size, last_used: now });
        self.used += size;
        false
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.used = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillMode {
    /// Accept only when idle with a free slot; otherwise reject to the gateway.
    Reject,
    /// Accept everything into a local FIFO.
    LocalQueue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Offer {
    Accepted,
    Rejected,
}

/// What the prefill engine needs to know about a request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefillItem {
    pub id: RequestId,
    pub scenario: ScenarioId,
    /// `(prefix, length in tokens, KVCache bytes)`.
    pub prefix: Option<(PrefixId, u32, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaunchedBatch {
    pub members: Vec<RequestId>,
    pub latency: f64,
    pub completes_at: f64,
    pub hits: u32,
    pub r_pre: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PrefillCounters {
    pub accepted: u64,
    pub rejected: u64,
    pub batches: u64,
    pub prefilled: u64,
    pub busy_time: f64,
}

#[derive(Debug, Clone)]
pub struct PrefillInstance {
    pub id: InstanceId,
    pub group: String,
    max_batch: u32,
    mode: PrefillMode,
    busy: bool,
    /// Every request holding a slot: forming, executing, or awaiting transfer.
    slots: Vec<RequestId>,
    forming: Vec<PrefillItem>,
    executing: Vec<RequestId>,
    local_queue: VecDeque<PrefillItem>,
    cache: PrefixCache,
    batch_started: f64,
    pub counters: PrefillCounters,
}

impl PrefillInstance {
    pub fn new(id: InstanceId, group: impl Into<String>, max_batch: u32, mode: PrefillMode, hbm_budget: u64) -> Self {
        Self {
            id,
            group: group.into(),
            max_batch: max_batch.max(1),
            mode,
            busy: false,
            slots: Vec::new(),
            forming: Vec::new(),
            executing: Vec::new(),
            local_queue: VecDeque::new(),
            cache: PrefixCache::new(hbm_budget),
            batch_started: 0.0,
            counters: PrefillCounters::default(),
        }
    }

    pub fn max_batch(&self) -> u32 {
        self.max_batch
    }

    pub fn mode(&self) -> PrefillMode {
        self.mode
    }

    pub fn busy(&self) -> bool {
        self.busy
    }

    pub fn occupied_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn free_slots(&self) -> usize {
        self.max_batch as usize - self.slots.len()
    }

    pub fn holds(&self, id: RequestId) -> bool {
        self.slots.contains(&id)
    }

    /// Requests holding a slot, in acquisition order.
    pub fn slots(&self) -> &[RequestId] {
        &self.slots
    }

    pub fn forming(&self) -> &[PrefillItem] {
        &self.forming
    }

    pub fn executing(&self) -> &[RequestId] {
        &self.executing
    }

    pub fn local_queue(&self) -> &VecDeque<PrefillItem> {
        &self.local_queue
    }

    pub fn cache(&self) -> &PrefixCache {
        &self.cache
    }

    /// Offers a request. In reject mode acceptance reserves a slot in the
    /// forming batch; in local-queue mode the request waits in the queue.
    pub fn offer(&mut self, item: PrefillItem) -> Offer {
        match self.mode {
            PrefillMode::Reject => {
                if self.busy || self.free_slots() == 0 {
                    self.counters.rejected += 1;
                    Offer::Rejected
                } else {
                    self.slots.push(item.id);
                    self.forming.push(item);
                    self.counters.accepted += 1;
                    Offer::Accepted
                }
            }
            PrefillMode::LocalQueue => {
                self.local_queue.push_back(item);
                self.counters.accepted += 1;
                Offer::Accepted
            }
        }
    }

    /// Local-queue mode: moves queued requests into the forming batch while
    /// slots are free. Returns the requests moved.
    pub fn pull_from_queue(&mut self) -> Vec<RequestId> {
        let mut moved = Vec::new();
        if self.busy {
            return moved;
        }
        while self.free_slots() > 0 {
            let Some(item) = self.local_queue.pop_front() else { break };
            self.slots.push(item.id);
            moved.push(item.id);
            self.forming.push(item);
        }
        moved
    }

    /// Drops a request from the local queue. Returns whether it was queued.
    pub fn dequeue(&mut self, id: RequestId) -> bool {
        let before = self.local_queue.len();
        self.local_queue.retain(|i| i.id != id);
        before != self.local_queue.len()
    }

    /// Removes a not-yet-launched request from the forming batch and frees its
    /// slot.
    pub fn withdraw(&mut self, id: RequestId) -> bool {
        let before = self.forming.len();
        self.forming.retain(|i| i.id != id);
        if before == self.forming.len() {
            return false;
        }
        self.slots.retain(|&s| s != id);
        true
    }

    /// Starts executing the forming batch.
    pub fn launch(&mut self, now: f64, profiles: &Profiles) -> Result<LaunchedBatch, InstanceError> {
        let batch = std::mem::take(&mut self.forming);
        match self.execute_prefill_batch(&batch, now, profiles) {
            Ok(b) => Ok(b),
            Err(e) => {
                self.forming = batch;
                Err(e)
            }
        }
    }

    /// Executes `batch`, whose members must already hold slots. Latency is the
    /// slowest member scenario's TTFT at the batch size, scaled by the batch
    /// prefix benefit `h * r_hit + (1 - h)` where `h` is the hit fraction.
    pub fn execute_prefill_batch(
        &mut self,
        batch: &[PrefillItem],
        now: f64,
        profiles: &Profiles,
    ) -> Result<LaunchedBatch, InstanceError> {
        if self.busy {
            return Err(InstanceError::Busy);
        }
        if batch.is_empty() {
            return Err(InstanceError::EmptyBatch);
        }
        if batch.len() > self.max_batch as usize {
            return Err(InstanceError::BatchOverflow {
                size: batch.len(),
                max: self.max_batch,
            });
        }
        if let Some(item) = batch.iter().find(|i| !self.slots.contains(&i.id)) {
            return Err(InstanceError::NoSlot(item.id.0));
        }
        let size = batch.len() as u32;
        let mut ttft = 0.0f64;
        for item in batch {
            ttft = ttft.max(profile(profiles, item.scenario)?.ttft().lookup(size)?);
        }
        let mut hits = 0u32;
        let mut r_sum = 0.0;
        for item in batch {
            let p = profile(profiles, item.scenario)?;
            let hit = match item.prefix {
                Some((prefix, len, bytes)) => self.cache.access(prefix, len, bytes, now),
                None => false,
            };
            if hit {
                hits += 1;
                r_sum += p.prefix_benefit();
            } else {
                r_sum += 1.0;
            }
        }
        let r_pre = r_sum / f64::from(size);
        let latency = ttft * r_pre;
        self.busy = true;
        self.batch_started = now;
        self.executing = batch.iter().map(|i| i.id).collect();
        self.counters.batches += 1;
        Ok(LaunchedBatch {
            members: self.executing.clone(),
            latency,
            completes_at: now + latency,
            hits,
            r_pre,
        })
    }

    /// Ends the executing batch. Members keep their slots until
    /// [`release`](Self::release).
    pub fn complete_batch(&mut self, now: f64) -> Result<Vec<RequestId>, InstanceError> {
        if !self.busy {
            return Err(InstanceError::NotBusy);
        }
        self.busy = false;
        self.counters.busy_time += now - self.batch_started;
        let done = std::mem::take(&mut self.executing);
        self.counters.prefilled += done.len() as u64;
        Ok(done)
    }

    /// Frees the slot of a request whose KVCache left (or which failed).
    pub fn release(&mut self, id: RequestId) -> Result<(), InstanceError> {
        let pos = self.slots.iter().position(|&s| s == id).ok_or(InstanceError::NoSlot(id.0))?;
        self.slots.remove(pos);
        Ok(())
    }

    /// Drops all state, as when the device faults. Returns every request the
    /// instance held, queued ones included.
    pub fn evict_all(&mut self, now: f64) -> Vec<RequestId> {
        if self.busy {
            self.counters.busy_time += now - self.batch_started;
        }
        let mut out: Vec<RequestId> = self.slots.drain(..).collect();
        out.extend(self.local_queue.drain(..).map(|i| i.id));
        self.forming.clear();
        self.executing.clear();
        self.busy = false;
        self.cache.clear();
        out
    }

    /// Busy time including a batch still executing at `now`.
    pub fn busy_time_at(&self, now: f64) -> f64 {
        self.counters.busy_time + if self.busy { now - self.batch_started } else { 0.0 }
    }
}

/// A request being (or about to be) decoded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeSlot {
    pub id: RequestId,
    pub scenario: ScenarioId,
    pub output_len: u32,
    pub emitted: u32,
}

impl DecodeSlot {
    pub fn new(id: RequestId, scenario: ScenarioId, output_len: u32) -> Self {
        Self {
            id,
            scenario,
            output_len,
            emitted: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Admission {
    Running,
    Queued,
    Refused,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct QueuedKv {
    slot: DecodeSlot,
    arrived: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DecodeCounters {
    pub admitted: u64,
    pub queued: u64,
    pub refused: u64,
    pub iterations: u64,
    pub tokens: u64,
    pub completed: u64,
    pub busy_time: f64,
}

/// Continuous-batching decoder with a bounded asynchronous retrieval queue.
///
/// Admission is decided when a KVCache transfer starts: the request either
/// reserves a running slot, a retrieval-queue entry, or is refused. Arrived
/// requests join the running batch only at iteration boundaries.
#[derive(Debug, Clone)]
pub struct DecodeInstance {
    pub id: InstanceId,
    pub group: String,
    max_batch: u32,
    retrieval_capacity: u32,
    running: Vec<DecodeSlot>,
    joining: Vec<DecodeSlot>,
    inbound: Vec<DecodeSlot>,
    retrieval_queue: VecDeque<QueuedKv>,
    iterating: bool,
    iteration_started: f64,
    pub counters: DecodeCounters,
}

impl DecodeInstance {
    pub fn new(id: InstanceId, group: impl Into<String>, max_batch: u32, retrieval_capacity: u32) -> Self {
        Self {
            id,
            group: group.into(),
            max_batch: max_batch.max(1),
            retrieval_capacity,
            running: Vec::new(),
            joining: Vec::new(),
            inbound: Vec::new(),
            retrieval_queue: VecDeque::new(),
            iterating: false,
            iteration_started: 0.0,
            counters: DecodeCounters::default(),
        }
    }

    pub fn max_batch(&self) -> u32 {
        self.max_batch
    }

    pub fn retrieval_capacity(&self) -> u32 {
        self.retrieval_capacity
    }

    pub fn running(&self) -> &[DecodeSlot] {
        &self.running
    }

    pub fn retrieval_len(&self) -> usize {
        self.retrieval_queue.len()
    }

    pub fn iterating(&self) -> bool {
        self.iterating
    }

    /// Running plus slots promised to joining or inbound requests.
    pub fn committed(&self) -> usize {
        self.running.len() + self.joining.len() + self.inbound.len()
    }

    /// Every request with state on this instance.
    pub fn load(&self) -> usize {
        self.committed() + self.retrieval_queue.len()
    }

    pub fn has_room(&self) -> bool {
        self.committed() < self.max_batch as usize || self.retrieval_queue.len() < self.retrieval_capacity as usize
    }

    /// Reserves room for an incoming KVCache.
    pub fn decode_admit(&mut self, slot: DecodeSlot) -> Admission {
        if self.committed() < self.max_batch as usize {
            self.inbound.push(slot);
            self.counters.admitted += 1;
            Admission::Running
        } else if self.retrieval_queue.len() < self.retrieval_capacity as usize {
            self.retrieval_queue.push_back(QueuedKv { slot, arrived: false });
            self.counters.queued += 1;
            Admission::Queued
        } else {
            self.counters.refused += 1;
            Admission::Refused
        }
    }

    /// Marks a reserved KVCache as arrived. Returns true if the instance is
    /// idle and should start an iteration now.
    pub fn kv_arrived(&mut self, id: RequestId) -> Result<bool, InstanceError> {
        if let Some(pos) = self.inbound.iter().position(|s| s.id == id) {
            let slot = self.inbound.remove(pos);
            self.joining.push(slot);
        } else if let Some(q) = self.retrieval_queue.iter_mut().find(|q| q.slot.id == id) {
            q.arrived = true;
        } else {
            return Err(InstanceError::NoReservation(id.0));
        }
        Ok(!self.iterating && !self.joining.is_empty())
    }

    /// Cancels a reservation whose transfer will not complete.
    pub fn cancel_reservation(&mut self, id: RequestId) -> bool {
        if let Some(pos) = self.inbound.iter().position(|s| s.id == id) {
            self.inbound.remove(pos);
            self.promote();
            return true;
        }
        let before = self.retrieval_queue.len();
        self.retrieval_queue.retain(|q| q.slot.id != id);
        before != self.retrieval_queue.len()
    }

    fn promote(&mut self) {
        while self.committed() < self.max_batch as usize {
            let Some(q) = self.retrieval_queue.pop_front() else { break };
            if q.arrived {
                self.joining.push(q.slot);
            } else {
                self.inbound.push(q.slot);
            }
        }
    }

    /// Starts an iteration at a boundary: joining requests enter the running
    /// batch. Returns the iteration period, or `None` if nothing runs.
    pub fn begin_iteration(&mut self, now: f64, profiles: &Profiles) -> Result<Option<f64>, InstanceError> {
        if self.iterating {
            return Err(InstanceError::Busy);
        }
        self.running.append(&mut self.joining);
        if self.running.is_empty() {
            return Ok(None);
        }
        let size = self.running.len() as u32;
        let mut period = 0.0f64;
        for slot in &self.running {
            period = period.max(profile(profiles, slot.scenario)?.tpot().lookup(size)?);
        }
        self.iterating = true;
        self.iteration_started = now;
        Ok(Some(period))
    }

    /// Ends the current iteration: every running request emits one token and
    /// finished ones leave, freeing room for the retrieval-queue head.
    pub fn decode_iteration(&mut self, now: f64) -> Result<Vec<DecodeSlot>, InstanceError> {
        if !self.iterating {
            return Err(InstanceError::Idle);
        }
        self.iterating = false;
        self.counters.iterations += 1;
        self.counters.busy_time += now - self.iteration_started;
        self.counters.tokens += self.running.len() as u64;
        let mut done = Vec::new();
        self.running.retain_mut(|s| {
            s.emitted += 1;
            if s.emitted >= s.output_len {
                done.push(*s);
                false
            } else {
                true
            }
        });
        self.counters.completed += done.len() as u64;
        self.promote();
        Ok(done)
    }

    /// Removes one request wherever it sits. Returns whether it was present.
    pub fn abort(&mut self, id: RequestId) -> bool {
        let before = self.load();
        self.running.retain(|s| s.id != id);
        self.joining.retain(|s| s.id != id);
        self.inbound.retain(|s| s.id != id);
        self.retrieval_queue.retain(|q| q.slot.id != id);
        let removed = before != self.load();
        if removed {
            self.promote();
        }
        removed
    }

    /// Drops all state. Returns every request the instance held.
    pub fn evict_all(&mut self, now: f64) -> Vec<RequestId> {
        if self.iterating {
            self.counters.busy_time += now - self.iteration_started;
        }
        self.iterating = false;
        let mut out: Vec<RequestId> = self.running.drain(..).map(|s| s.id).collect();
        out.extend(self.joining.drain(..).map(|s| s.id));
        out.extend(self.inbound.drain(..).map(|s| s.id));
        out.extend(self.retrieval_queue.drain(..).map(|q| q.slot.id));
        out
    }

    pub fn busy_time_at(&self, now: f64) -> f64 {
        self.counters.busy_time + if self.iterating { now - self.iteration_started } else { 0.0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perf_model::LatencyTable;

    fn profiles(ttft: f64, tpot: f64, r: f64) -> Vec<Option<PerfProfile>> {
        let t = LatencyTable::new(vec![(1, ttft), (8, ttft * 2.0)]).unwrap();
        let d = LatencyTable::new(vec![(1, tpot), (8, tpot)]).unwrap();
        vec![Some(PerfProfile::new(t, d, r, 10.0, 0.0).unwrap())]
    }

    fn item(id: u64, prefix: Option<u32>) -> PrefillItem {
        PrefillItem {
            id: RequestId(id),
            scenario: ScenarioId(0),
            prefix: prefix.map(|p| (PrefixId(p), 100, 1_000)),
        }
    }

    #[test]
    fn reject_mode_admission() {
        let mut p = PrefillInstance::new(InstanceId(0), "g", 2, PrefillMode::Reject, 0);
        assert_eq!(p.offer(item(1, None)), Offer::Accepted);
        let prof = profiles(0.5, 0.05, 0.6);
        p.launch(0.0, &prof).unwrap();
        assert_eq!(p.offer(item(2, None)), Offer::Rejected);
        assert!(p.local_queue().is_empty());
        assert_eq!(p.counters.rejected, 1);
    }

    #[test]
    fn reject_mode_full_slots() {
        let mut p = PrefillInstance::new(InstanceId(0), "g", 1, PrefillMode::Reject, 0);
        assert_eq!(p.offer(item(1, None)), Offer::Accepted);
        assert_eq!(p.offer(item(2, None)), Offer::Rejected);
    }

    #[test]
    fn local_queue_always_accepts() {
        let mut p = PrefillInstance::new(InstanceId(0), "g", 1, PrefillMode::LocalQueue, 0);
        let prof = profiles(0.5, 0.05, 0.6);
        p.offer(item(1, None));
        assert_eq!(p.pull_from_queue(), vec![RequestId(1)]);
        p.launch(0.0, &prof).unwrap();
        assert_eq!(p.offer(item(2, None)), Offer::Accepted);
        assert_eq!(p.local_queue().len(), 1);
        assert!(p.pull_from_queue().is_empty());
    }

    #[test]
    fn prefill_latency_hit_and_miss() {
        let prof = profiles(0.5, 0.05, 0.6);
        let mut p = PrefillInstance::new(InstanceId(0), "g", 1, PrefillMode::Reject, 10_000);
        p.offer(item(1, Some(7)));
        let b = p.launch(1.0, &prof).unwrap();
        assert_eq!(b.hits, 0);
        assert!((b.completes_at - 1.5).abs() < 1e-12);
        assert_eq!(p.complete_batch(1.5).unwrap(), vec![RequestId(1)]);
        assert_eq!(p.occupied_slots(), 1);
        p.release(RequestId(1)).unwrap();
        p.offer(item(2, Some(7)));
        let b = p.launch(2.0, &prof).unwrap();
        assert_eq!(b.hits, 1);
        assert!((b.latency - 0.3).abs() < 1e-12);
    }

    #[test]
    fn batch_overflow_and_busy() {
        let prof = profiles(0.5, 0.05, 0.6);
        let mut p = PrefillInstance::new(InstanceId(0), "g", 1, PrefillMode::Reject, 0);
        let err = p.execute_prefill_batch(&[item(1, None), item(2, None)], 0.0, &prof);
        assert!(matches!(err, Err(InstanceError::BatchOverflow { size: 2, max: 1 })));
        p.offer(item(1, None));
        p.launch(0.0, &prof).unwrap();
        assert_eq!(p.launch(0.0, &prof), Err(InstanceError::Busy));
    }

    #[test]
    fn lru_eviction_respects_budget() {
        let mut c = PrefixCache::new(250);
        assert!(!c.access(PrefixId(1), 10, 100, 0.0));
        assert!(!c.access(PrefixId(2), 10, 100, 1.0));
        assert!(c.access(PrefixId(1), 10, 100, 2.0));
        assert!(!c.access(PrefixId(3), 10, 100, 3.0));
        assert!(c.contains(PrefixId(1)) && c.contains(PrefixId(3)) && !c.contains(PrefixId(2)));
        assert!(c.used() <= c.budget());
        assert!(!c.access(PrefixId(4), 10, 1_000, 4.0));
        assert!(!c.contains(PrefixId(4)));
    }

    #[test]
    fn decode_admission_outcomes() {
        let mut d = DecodeInstance::new(InstanceId(0), "g", 1, 1);
        assert_eq!(d.decode_admit(DecodeSlot::new(RequestId(1), ScenarioId(0), 3)), Admission::Running);
        assert_eq!(d.decode_admit(DecodeSlot::new(RequestId(2), ScenarioId(0), 3)), Admission::Queued);
        assert_eq!(d.decode_admit(DecodeSlot::new(RequestId(3), ScenarioId(0), 3)), Admission::Refused);
    }

    #[test]
    fn decode_three_iterations() {
        let prof = profiles(0.5, 0.05, 1.0);
        let mut d = DecodeInstance::new(InstanceId(0), "g", 4, 1);
        d.decode_admit(DecodeSlot::new(RequestId(1), ScenarioId(0), 3));
        assert!(d.kv_arrived(RequestId(1)).unwrap());
        let mut now = 0.0;
        let mut finished = Vec::new();
        while let Some(period) = d.begin_iteration(now, &prof).unwrap() {
            now += period;
            finished.extend(d.decode_iteration(now).unwrap());
        }
        assert_eq!(finished.len(), 1);
        assert!((now - 0.15).abs() < 1e-12);
        assert_eq!(d.counters.iterations, 3);
    }

    #[test]
    fn completion_promotes_queue_head_at_boundary() {
        let prof = profiles(0.5, 0.05, 1.0);
        let mut d = DecodeInstance::new(InstanceId(0), "g", 1, 1);
        d.decode_admit(DecodeSlot::new(RequestId(1), ScenarioId(0), 1));
        d.kv_arrived(RequestId(1)).unwrap();
        assert_eq!(d.decode_admit(DecodeSlot::new(RequestId(2), ScenarioId(0), 1)), Admission::Queued);
        d.kv_arrived(RequestId(2)).unwrap();
        d.begin_iteration(0.0, &prof).unwrap();
        let done = d.decode_iteration(0.05).unwrap();
        assert_eq!(done[0].id, RequestId(1));
        d.begin_iteration(0.05, &prof).unwrap();
        assert_eq!(d.running()[0].id, RequestId(2));
        assert_eq!(d.retrieval_len(), 0);
    }

    #[test]
    fn arrivals_wait_for_boundary() {
        let prof = profiles(0.5, 0.05, 1.0);
        let mut d = DecodeInstance::new(InstanceId(0), "g", 4, 1);
        d.decode_admit(DecodeSlot::new(RequestId(1), ScenarioId(0), 5));
        d.kv_arrived(RequestId(1)).unwrap();
        d.begin_iteration(0.0, &prof).unwrap();
        d.decode_admit(DecodeSlot::new(RequestId(2), ScenarioId(0), 5));
        assert!(!d.kv_arrived(RequestId(2)).unwrap());
        assert_eq!(d.running().len(), 1);
        d.decode_iteration(0.05).unwrap();
        d.begin_iteration(0.05, &prof).unwrap();
        assert_eq!(d.running().len(), 2);
    }

    #[test]
    fn abort_frees_room_for_queue_head() {
        let mut d = DecodeInstance::new(InstanceId(0), "g", 1, 1);
        d.decode_admit(DecodeSlot::new(RequestId(1), ScenarioId(0), 5));
        d.decode_admit(DecodeSlot::new(RequestId(2), ScenarioId(0), 5));
        assert!(d.abort(RequestId(1)));
        assert!(!d.abort(RequestId(1)));
        assert_eq!(d.retrieval_len(), 0);
        assert_eq!(d.committed(), 1);
        assert!(d.kv_arrived(RequestId(2)).unwrap());
    }
}
