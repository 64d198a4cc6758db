//! Request entry point.
//!
//! Two policies: `Baseline` pushes each request once into the local queue of
//! the prefill with the fewest open SSE connections; `OnDemand` offers the
//! request to idle prefills, which may reject it, and retries in rounds until
//! one accepts or the TTFT deadline passes.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::{InstanceId, Offer};
use crate::workload::{RequestId, ScenarioId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("request {0} closed an SSE connection it never opened")]
    CloseWithoutOpen(u64),
    #[error("request {0} opened a second SSE connection")]
    DoubleOpen(u64),
    #[error("invalid gateway config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayPolicy {
    Baseline,
    OnDemand,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub policy: GatewayPolicy,
    /// Candidates offered per retry round.
    pub retry_subset_size: u32,
    /// Seconds between retry rounds.
    pub retry_interval: f64,
    /// Batch-formation window as a fraction of TTFT at batch size 1.
    pub batch_window_factor: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            policy: GatewayPolicy::OnDemand,
            retry_subset_size: 4,
            retry_interval: 0.005,
            batch_window_factor: 0.1,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.retry_subset_size == 0 {
            return Err(GatewayError::InvalidConfig("retry_subset_size must be at least 1"));
        }
        if !(self.retry_interval > 0.0 && self.retry_interval.is_finite()) {
            return Err(GatewayError::InvalidConfig("retry_interval must be positive"));
        }
        if !(self.batch_window_factor >= 0.0 && self.batch_window_factor.is_finite()) {
            return Err(GatewayError::InvalidConfig("batch_window_factor must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Attempt {
    pub prefill: InstanceId,
    pub at: f64,
    pub outcome: Offer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteOutcome {
    Assigned(InstanceId),
    /// Every candidate in this round rejected.
    Retry,
    /// No candidate prefill exists right now.
    NoCandidates,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GatewayCounters {
    pub routed: u64,
    pub offers: u64,
    pub rejections: u64,
    pub rounds: u64,
    pub early_terminations: u64,
    pub opens: u64,
    pub closes: u64,
}

#[derive(Debug, Clone)]
pub struct GatewayState {
    config: GatewayConfig,
    sse: BTreeMap<InstanceId, u64>,
    open: BTreeMap<RequestId, InstanceId>,
    pending: BTreeMap<ScenarioId, VecDeque<RequestId>>,
    window: BTreeMap<ScenarioId, usize>,
    attempts: BTreeMap<RequestId, Vec<Attempt>>,
    pub counters: GatewayCounters,
}

impl GatewayState {
    pub fn new(config: GatewayConfig) -> Self {
        Self {
            config,
            sse: BTreeMap::new(),
            open: BTreeMap::new(),
            pending: BTreeMap::new(),
            window: BTreeMap::new(),
            attempts: BTreeMap::new(),
            counters: GatewayCounters::default(),
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn policy(&self) -> GatewayPolicy {
        self.config.policy
    }

    pub fn sse_count(&self, prefill: InstanceId) -> u64 {
        self.sse.get(&prefill).copied().unwrap_or(0)
    }

    pub fn sse_counts(&self) -> &BTreeMap<InstanceId, u64> {
        &self.sse
    }

    pub fn open_connections(&self) -> usize {
        self.open.len()
    }

    pub fn attempts(&self, id: RequestId) -> &[Attempt] {
        self.attempts.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn attempt_log(&self) -> &BTreeMap<RequestId, Vec<Attempt>> {
        &self.attempts
    }

    pub fn sse_open(&mut self, id: RequestId, prefill: InstanceId) -> Result<(), GatewayError> {
        if self.open.contains_key(&id) {
            return Err(GatewayError::DoubleOpen(id.0));
        }
        self.open.insert(id, prefill);
        *self.sse.entry(prefill).or_insert(0) += 1;
        self.counters.opens += 1;
        Ok(())
    }

    /// Closes the request's connection. Returns the prefill it was counted
    /// against.
    pub fn sse_close(&mut self, id: RequestId) -> Result<InstanceId, GatewayError> {
        let prefill = self.open.remove(&id).ok_or(GatewayError::CloseWithoutOpen(id.0))?;
        let count = self.sse.get_mut(&prefill).expect("opened");
        *count -= 1;
        self.counters.closes += 1;
        Ok(prefill)
    }

    pub fn has_open(&self, id: RequestId) -> bool {
        self.open.contains_key(&id)
    }

    /// Candidates in ascending SSE count, ties by instance id.
    pub fn rank(&self, candidates: &[InstanceId]) -> Vec<InstanceId> {
        let mut ranked = candidates.to_vec();
        ranked.sort_by_key(|&p| (self.sse_count(p), p));
        ranked
    }

    pub fn enqueue(&mut self, scenario: ScenarioId, id: RequestId) {
        self.pending.entry(scenario).or_default().push_back(id);
    }

    pub fn head(&self, scenario: ScenarioId) -> Option<RequestId> {
        self.pending.get(&scenario).and_then(|q| q.front().copied())
    }

    pub fn pop_head(&mut self, scenario: ScenarioId) -> Option<RequestId> {
        self.pending.get_mut(&scenario).and_then(VecDeque::pop_front)
    }

    /// Removes a waiting request, e.g. at its TTFT deadline.
    pub fn withdraw(&mut self, scenario: ScenarioId, id: RequestId) -> bool {
        let Some(q) = self.pending.get_mut(&scenario) else { return false };
        let before = q.len();
        q.retain(|&r| r != id);
        before != q.len()
    }

    pub fn waiting(&self, scenario: ScenarioId) -> usize {
        self.pending.get(&scenario).map_or(0, VecDeque::len)
    }

    pub fn total_waiting(&self) -> usize {
        self.pending.values().map(VecDeque::len).sum()
    }

    pub fn scenarios_waiting(&self) -> Vec<ScenarioId> {
        self.pending
            .iter()
            .filter(|(_, q)| !q.is_empty())
            .map(|(&s, _)| s)
            .collect()
    }

    fn log(&mut self, id: RequestId, prefill: InstanceId, at: f64, outcome: Offer) {
        self.attempts.entry(id).or_default().push(Attempt { prefill, at, outcome });
        self.counters.offers += 1;
        if outcome == Offer::Rejected {
            self.counters.rejections += 1;
        }
    }

    /// One on-demand round for `id`: offers it to up to `retry_subset_size`
    /// ranked candidates one after another. Successive rounds for the same
    /// scenario move the subset window down the ranking so every candidate
    /// is eventually probed; acceptance resets the window.
    pub fn route_round(
        &mut self,
        id: RequestId,
        scenario: ScenarioId,
        candidates: &[InstanceId],
        now: f64,
        mut offer: impl FnMut(InstanceId) -> Offer,
    ) -> RouteOutcome {
        if candidates.is_empty() {
            return RouteOutcome::NoCandidates;
        }
        self.counters.rounds += 1;
        let ranked = self.rank(candidates);
        let n = ranked.len();
        let size = (self.config.retry_subset_size as usize).min(n);
        let round = self.window.get(&scenario).copied().unwrap_or(0);
        let start = (round * size) % n;
        for k in 0..size {
            let p = ranked[(start + k) % n];
            let outcome = offer(p);
            self.log(id, p, now, outcome);
            if outcome == Offer::Accepted {
                self.window.remove(&scenario);
                self.counters.routed += 1;
                return RouteOutcome::Assigned(p);
            }
        }
        self.window.insert(scenario, round + 1);
        RouteOutcome::Retry
    }

    /// Offers one more request to a prefill that just accepted, to fill its
    /// batch. Returns whether it was taken.
    pub fn offer_fill(
        &mut self,
        id: RequestId,
        prefill: InstanceId,
        now: f64,
        offer: impl FnOnce(InstanceId) -> Offer,
    ) -> bool {
        let outcome = offer(prefill);
        self.log(id, prefill, now, outcome);
        if outcome == Offer::Accepted {
            self.counters.routed += 1;
        }
        outcome == Offer::Accepted
    }

    /// Baseline: the least-connections candidate, which queues the request.
    pub fn baseline_target(&self, candidates: &[InstanceId]) -> Option<InstanceId> {
        self.rank(candidates).first().copied()
    }

    pub fn record_baseline(&mut self, id: RequestId, prefill: InstanceId, now: f64) {
        self.log(id, prefill, now, Offer::Accepted);
        self.counters.routed += 1;
    }

    pub fn record_early_termination(&mut self) {
        self.counters.early_terminations += 1;
    }

    /// Attempt-log invariants: times non-decreasing, at most one acceptance.
    pub fn check_attempt_log(&self) -> Result<(), String> {
        for (id, log) in &self.attempts {
            if log.windows(2).any(|w| w[1].at < w[0].at) {
                return Err(format!("request {} attempts out of time order", id.0));
            }
            if log.iter().filter(|a| a.outcome == Offer::Accepted).count() > 1 {
                return Err(format!("request {} accepted more than once", id.0));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gw() -> GatewayState {
        GatewayState::new(GatewayConfig::default())
    }

    #[test]
    fn single_idle_prefill_accepts_first() {
        let mut g = gw();
        let out = g.route_round(RequestId(1), ScenarioId(0), &[InstanceId(0)], 0.0, |_| Offer::Accepted);
        assert_eq!(out, RouteOutcome::Assigned(InstanceId(0)));
        assert_eq!(g.attempts(RequestId(1)).len(), 1);
    }

    #[test]
    fn least_connections_order() {
        let mut g = gw();
        for i in 0..3 {
            g.sse_open(RequestId(i), InstanceId(0)).unwrap();
        }
        g.sse_open(RequestId(9), InstanceId(1)).unwrap();
        let mut order = Vec::new();
        g.route_round(RequestId(5), ScenarioId(0), &[InstanceId(0), InstanceId(1)], 0.0, |p| {
            order.push(p);
            Offer::Rejected
        });
        assert_eq!(order, vec![InstanceId(1), InstanceId(0)]);
    }

    #[test]
    fn subset_window_rotates_over_all_candidates() {
        let mut g = GatewayState::new(GatewayConfig {
            retry_subset_size: 2,
            ..GatewayConfig::default()
        });
        let cands: Vec<InstanceId> = (0..5).map(InstanceId).collect();
        let mut seen = std::collections::BTreeSet::new();
        for round in 0..3 {
            let out = g.route_round(RequestId(1), ScenarioId(0), &cands, f64::from(round), |p| {
                seen.insert(p);
                Offer::Rejected
            });
            assert_eq!(out, RouteOutcome::Retry);
        }
        assert_eq!(seen.len(), 5);
        g.check_attempt_log().unwrap();
    }

    #[test]
    fn empty_candidates() {
        let mut g = gw();
        assert_eq!(
            g.route_round(RequestId(1), ScenarioId(0), &[], 0.0, |_| Offer::Accepted),
            RouteOutcome::NoCandidates
        );
    }

    #[test]
    fn sse_conservation_and_bug_detector() {
        let mut g = gw();
        g.sse_open(RequestId(1), InstanceId(0)).unwrap();
        assert_eq!(g.sse_count(InstanceId(0)), 1);
        assert_eq!(g.sse_close(RequestId(1)).unwrap(), InstanceId(0));
        assert_eq!(g.sse_count(InstanceId(0)), 0);
        assert_eq!(g.sse_close(RequestId(1)), Err(GatewayError::CloseWithoutOpen(1)));
        assert_eq!(g.counters.opens, g.counters.closes);
    }

    #[test]
    fn pending_fifo() {
        let mut g = gw();
        g.enqueue(ScenarioId(0), RequestId(1));
        g.enqueue(ScenarioId(0), RequestId(2));
        assert!(g.withdraw(ScenarioId(0), RequestId(1)));
        assert_eq!(g.pop_head(ScenarioId(0)), Some(RequestId(2)));
        assert_eq!(g.total_waiting(), 0);
    }

    #[test]
    fn fill_logs_attempts() {
        let mut g = gw();
        assert!(g.offer_fill(RequestId(3), InstanceId(2), 1.0, |_| Offer::Accepted));
        assert!(!g.offer_fill(RequestId(4), InstanceId(2), 1.0, |_| Offer::Rejected));
        assert_eq!(g.counters.routed, 1);
    }
}
