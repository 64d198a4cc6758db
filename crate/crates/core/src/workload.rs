//! Scenario-tagged request traces.
//!
//! Each scenario draws prompt length, prefix and output length from its own
//! finite distributions. Arrivals are Poisson within each traffic slot, with
//! rates changing step-wise at slot boundaries.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perf_model::ClusterShape;
use crate::sim::RngStreams;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("no scenarios given")]
    NoScenarios,
    #[error("scenario `{0}` declared twice")]
    DuplicateScenario(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("unknown prefix `{prefix}` in scenario `{scenario}`")]
    UnknownPrefix { scenario: String, prefix: String },
    #[error("distribution must have finite, non-empty support with positive weights")]
    BadDistribution,
    #[error("scenario `{scenario}`: prefix `{prefix}` ({len} tokens) must be shorter than the shortest prompt ({min_prompt})")]
    PrefixTooLong {
        scenario: String,
        prefix: String,
        len: u32,
        min_prompt: u32,
    },
    #[error("scenario `{0}`: ttft_slo must be positive and below e2e_timeout")]
    BadDeadlines(String),
    #[error("traffic slots must start at strictly increasing times before the trace end")]
    UnsortedSlots,
    #[error("traffic rate for `{scenario}` must be finite and non-negative, got {rate}")]
    BadRate { scenario: String, rate: f64 },
    #[error("timestamp for {phase:?} at {time} breaks phase order")]
    NonMonotoneTimestamp { phase: Phase, time: f64 },
    #[error("request {0} already reached a terminal status")]
    AlreadyTerminal(u64),
    #[error("status {0:?} is not terminal")]
    NotTerminal(RequestStatus),
    #[error("cannot compute mismatch from an empty log")]
    EmptyLog,
    #[error("trace line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScenarioId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PrefixId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestId(pub u64);

/// Finite discrete distribution over token counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u32, f64)>", into = "Vec<(u32, f64)>")]
pub struct DiscreteDist {
    support: Vec<(u32, f64)>,
}

impl DiscreteDist {
    pub fn new(support: Vec<(u32, f64)>) -> Result<Self, WorkloadError> {
        if support.is_empty() || support.iter().any(|&(_, w)| !(w > 0.0) || !w.is_finite()) {
            return Err(WorkloadError::BadDistribution);
        }
        Ok(Self { support })
    }

    pub fn constant(value: u32) -> Self {
        Self {
            support: vec![(value, 1.0)],
        }
    }

    pub fn support(&self) -> &[(u32, f64)] {
        &self.support
    }

    pub fn min(&self) -> u32 {
        self.support.iter().map(|&(v, _)| v).min().unwrap_or(0)
    }

    pub fn max(&self) -> u32 {
        self.support.iter().map(|&(v, _)| v).max().unwrap_or(0)
    }

    fn total_weight(&self) -> f64 {
        self.support.iter().map(|&(_, w)| w).sum()
    }

    /// Probability of each support point, in declaration order.
    pub fn probabilities(&self) -> Vec<f64> {
        let total = self.total_weight();
        self.support.iter().map(|&(_, w)| w / total).collect()
    }

    pub fn mean(&self) -> f64 {
        let total = self.total_weight();
        self.support.iter().map(|&(v, w)| f64::from(v) * w).sum::<f64>() / total
    }

    fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(self.support.iter().map(|&(_, w)| w)).expect("validated weights")
    }
}

impl TryFrom<Vec<(u32, f64)>> for DiscreteDist {
    type Error = WorkloadError;

    fn try_from(v: Vec<(u32, f64)>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<DiscreteDist> for Vec<(u32, f64)> {
    fn from(d: DiscreteDist) -> Self {
        d.support
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixSpec {
    pub name: String,
    /// Shared prefix length in tokens.
    pub len: u32,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    pub prompt_len: DiscreteDist,
    pub prefixes: Vec<PrefixSpec>,
    pub output_len: DiscreteDist,
    /// Seconds.
    pub ttft_slo: f64,
    /// Seconds.
    pub e2e_timeout: f64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.ttft_slo > 0.0) || !(self.ttft_slo < self.e2e_timeout) || !self.e2e_timeout.is_finite() {
            return Err(WorkloadError::BadDeadlines(self.name.clone()));
        }
        if self.prefixes.iter().any(|p| !(p.weight > 0.0) || !p.weight.is_finite()) {
            return Err(WorkloadError::BadDistribution);
        }
        let min_prompt = self.prompt_len.min();
        if min_prompt == 0 || self.output_len.min() == 0 {
            return Err(WorkloadError::BadDistribution);
        }
        if let Some(p) = self.prefixes.iter().find(|p| p.len >= min_prompt) {
            return Err(WorkloadError::PrefixTooLong {
                scenario: self.name.clone(),
                prefix: p.name.clone(),
                len: p.len,
                min_prompt,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSlot {
    /// Seconds.
    pub start: f64,
    /// Requests per second, per scenario name. Missing scenarios get zero.
    pub rates: BTreeMap<String, f64>,
}

/// Piecewise-constant arrival rates over `[slots[0].start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficTrace {
    pub slots: Vec<TrafficSlot>,
    pub end: f64,
}

impl TrafficTrace {
    pub fn constant(rates: BTreeMap<String, f64>, end: f64) -> Self {
        Self {
            slots: vec![TrafficSlot { start: 0.0, rates }],
            end,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let starts: Vec<f64> = self.slots.iter().map(|s| s.start).collect();
        if starts.iter().any(|s| !s.is_finite()) || starts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(WorkloadError::UnsortedSlots);
        }
        if let Some(&last) = starts.last() {
            if !(self.end > last) {
                return Err(WorkloadError::UnsortedSlots);
            }
        }
        for slot in &self.slots {
            for (scenario, &rate) in &slot.rates {
                if !(rate >= 0.0) || !rate.is_finite() {
                    return Err(WorkloadError::BadRate {
                        scenario: scenario.clone(),
                        rate,
                    });
                }
            }
        }
        Ok(())
    }

    /// Every rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for slot in &mut out.slots {
            for rate in slot.rates.values_mut() {
                *rate *= factor;
            }
        }
        out
    }

    /// `(start, end, rate)` for one scenario, skipping zero-rate slots.
    /// Time-averaged rate of `scenario` over the whole trace.
    pub fn mean_rate(&self, scenario: &str) -> f64 {
        let span = self.end - self.slots.first().map_or(0.0, |s| s.start);
        if span <= 0.0 {
            return 0.0;
        }
        self.windows_for(scenario).map(|(a, b, r)| (b - a) * r).sum::<f64>() / span
    }

    fn windows_for<'a>(&'a self, scenario: &'a str) -> impl Iterator<Item = (f64, f64, f64)> + 'a {
        self.slots.iter().enumerate().filter_map(move |(i, slot)| {
            let end = self.slots.get(i + 1).map_or(self.end, |next| next.start);
            let rate = slot.rates.get(scenario).copied().unwrap_or(0.0);
            (rate > 0.0).then_some((slot.start, end, rate))
        })
    }
}

/// Request lifecycle phases, in the order they occur.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Arrival,
    Accepted,
    PrefillStart,
    PrefillEnd,
    TransferStart,
    TransferEnd,
    DecodeStart,
    Finished,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::Arrival,
        Phase::Accepted,
        Phase::PrefillStart,
        Phase::PrefillEnd,
        Phase::TransferStart,
        Phase::TransferEnd,
        Phase::DecodeStart,
        Phase::Finished,
    ];
}

/// Per-phase timestamps; set times must be monotone in phase order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timestamps([Option<f64>; 8]);

impl Timestamps {
    pub fn get(&self, phase: Phase) -> Option<f64> {
        self.0[phase as usize]
    }

    pub fn set(&mut self, phase: Phase, time: f64) -> Result<(), WorkloadError> {
        let idx = phase as usize;
        let before_ok = self.0[..idx].iter().flatten().all(|&t| t <= time);
        let after_ok = self.0[idx + 1..].iter().flatten().all(|&t| t >= time);
        if !before_ok || !after_ok || !time.is_finite() {
            return Err(WorkloadError::NonMonotoneTimestamp { phase, time });
        }
        self.0[idx] = Some(time);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (Phase, f64)> + '_ {
        Phase::ALL.iter().filter_map(|&p| self.get(p).map(|t| (p, t)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Pending,
    Prefilling,
    Transferring,
    Decoding,
    Done,
    TimeoutTtft,
    TimeoutE2e,
    Failed,
}

impl RequestStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            RequestStatus::Done | RequestStatus::TimeoutTtft | RequestStatus::TimeoutE2e | RequestStatus::Failed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub scenario: ScenarioId,
    pub prompt_len: u32,
    pub prefix: Option<PrefixId>,
    pub prefix_len: u32,
    /// Tokens generated in decoding. Hidden from schedulers; the decoder only
    /// learns it has finished when the last token is emitted.
    pub output_len: u32,
    pub arrival: f64,
    pub timestamps: Timestamps,
    status: RequestStatus,
}

impl Request {
    pub fn new(
        id: RequestId,
        scenario: ScenarioId,
        prompt_len: u32,
        prefix: Option<PrefixId>,
        prefix_len: u32,
        output_len: u32,
        arrival: f64,
    ) -> Self {
        let mut timestamps = Timestamps::default();
        timestamps.0[Phase::Arrival as usize] = Some(arrival);
        Self {
            id,
            scenario,
            prompt_len,
            prefix,
            prefix_len,
            output_len,
            arrival,
            timestamps,
            status: RequestStatus::Pending,
        }
    }

    pub fn status(&self) -> RequestStatus {
        self.status
    }

    /// Moves to a non-terminal status. Ignored once terminal.
    pub fn advance(&mut self, status: RequestStatus) -> Result<(), WorkloadError> {
        if self.status.is_terminal() {
            return Err(WorkloadError::AlreadyTerminal(self.id.0));
        }
        if status.is_terminal() {
            return Err(WorkloadError::NotTerminal(status));
        }
        self.status = status;
        Ok(())
    }

    /// Sets the terminal status and finish time. May happen exactly once.
    pub fn finish(&mut self, status: RequestStatus, time: f64) -> Result<(), WorkloadError> {
        if self.status.is_terminal() {
            return Err(WorkloadError::AlreadyTerminal(self.id.0));
        }
        if !status.is_terminal() {
            return Err(WorkloadError::NotTerminal(status));
        }
        self.timestamps.set(Phase::Finished, time)?;
        self.status = status;
        Ok(())
    }

    pub fn is_terminal(&self) -> bool {
        self.status.is_terminal()
    }
}

/// Scenario table with resolved ids.
#[derive(Debug, Clone)]
pub struct Workload {
    scenarios: Vec<ScenarioSpec>,
    prefix_base: Vec<u32>,
}

impl Workload {
    pub fn new(scenarios: Vec<ScenarioSpec>) -> Result<Self, WorkloadError> {
        if scenarios.is_empty() {
            return Err(WorkloadError::NoScenarios);
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut prefix_base = Vec::with_capacity(scenarios.len());
        let mut next = 0u32;
        for s in &scenarios {
            s.validate()?;
            if !seen.insert(s.name.as_str()) {
                return Err(WorkloadError::DuplicateScenario(s.name.clone()));
            }
            prefix_base.push(next);
            next += s.prefixes.len() as u32;
        }
        Ok(Self { scenarios, prefix_base })
    }

    pub fn scenarios(&self) -> &[ScenarioSpec] {
        &self.scenarios
    }

    pub fn scenario(&self, id: ScenarioId) -> &ScenarioSpec {
        &self.scenarios[id.0 as usize]
    }

    pub fn scenario_id(&self, name: &str) -> Option<ScenarioId> {
        self.scenarios
            .iter()
            .position(|s| s.name == name)
            .map(|i| ScenarioId(i as u32))
    }

    pub fn prefix_id(&self, scenario: ScenarioId, local: usize) -> PrefixId {
        PrefixId(self.prefix_base[scenario.0 as usize] + local as u32)
    }

    /// `(scenario, prefix spec)` for a global prefix id.
    pub fn prefix(&self, id: PrefixId) -> Option<(ScenarioId, &PrefixSpec)> {
        let sid = self.prefix_base.partition_point(|&b| b <= id.0).checked_sub(1)?;
        let local = (id.0 - self.prefix_base[sid]) as usize;
        self.scenarios[sid].prefixes.get(local).map(|p| (ScenarioId(sid as u32), p))
    }
}

/// Generates the request trace for `trace` deterministically from `seed`.
///
/// Every scenario draws from its own named random stream, so adding or
/// reordering scenarios leaves the others' requests unchanged.
pub fn generate_trace(
    workload: &Workload,
    trace: &TrafficTrace,
    seed: u64,
) -> Result<Vec<Request>, WorkloadError> {
    trace.validate()?;
    for slot in &trace.slots {
        if let Some(name) = slot.rates.keys().find(|n| workload.scenario_id(n).is_none()) {
            return Err(WorkloadError::UnknownScenario(name.clone()));
        }
    }
    let streams = RngStreams::new(seed);
    let mut drafts: Vec<(f64, u32, Request)> = Vec::new();

    for (idx, spec) in workload.scenarios().iter().enumerate() {
        let sid = ScenarioId(idx as u32);
        let mut rng = streams.stream(&format!("workload/{}", spec.name));
        let prompt = spec.prompt_len.sampler();
        let output = spec.output_len.sampler();
        let prefix = (!spec.prefixes.is_empty())
            .then(|| WeightedIndex::new(spec.prefixes.iter().map(|p| p.weight)).expect("validated weights"));

        for (start, end, rate) in trace.windows_for(&spec.name) {
            let gap = Exp::new(rate).expect("positive rate");
            let mut t = start;
            loop {
                t += gap.sample(&mut rng);
                if t >= end {
                    break;
                }
                let prompt_len = spec.prompt_len.support()[prompt.sample(&mut rng)].0;
                let (prefix_id, prefix_len) = match &prefix {
                    Some(dist) => {
                        let local = dist.sample(&mut rng);
                        (Some(workload.prefix_id(sid, local)), spec.prefixes[local].len)
                    }
                    None => (None, 0),
                };
                let output_len = spec.output_len.support()[output.sample(&mut rng)].0;
                let req = Request::new(RequestId(0), sid, prompt_len, prefix_id, prefix_len, output_len, t);
                drafts.push((t, sid.0, req));
            }
        }
    }

    // Stable sort keeps per-scenario generation order for equal timestamps.
    drafts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(drafts
        .into_iter()
        .enumerate()
        .map(|(i, (_, _, mut req))| {
            req.id = RequestId(i as u64);
            req
        })
        .collect())
}

/// Line format for exported traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: u64,
    pub scenario: String,
    pub arrival: f64,
    pub prompt_len: u32,
    pub prefix: Option<String>,
    pub output_len: u32,
}

pub fn export_trace<W: Write>(workload: &Workload, requests: &[Request], mut out: W) -> Result<(), WorkloadError> {
    for req in requests {
        let record = TraceRecord {
            id: req.id.0,
            scenario: workload.scenario(req.scenario).name.clone(),
            arrival: req.arrival,
            prompt_len: req.prompt_len,
            prefix: req.prefix.and_then(|p| workload.prefix(p)).map(|(_, p)| p.name.clone()),
            output_len: req.output_len,
        };
        serde_json::to_writer(&mut out, &record).map_err(|e| WorkloadError::Parse { line: 0, source: e })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn import_trace<R: BufRead>(workload: &Workload, input: R) -> Result<Vec<Request>, WorkloadError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord =
            serde_json::from_str(&line).map_err(|source| WorkloadError::Parse { line: i + 1, source })?;
        let sid = workload
            .scenario_id(&rec.scenario)
            .ok_or_else(|| WorkloadError::UnknownScenario(rec.scenario.clone()))?;
        let spec = workload.scenario(sid);
        let (prefix, prefix_len) = match &rec.prefix {
            Some(name) => {
                let local = spec.prefixes.iter().position(|p| &p.name == name).ok_or_else(|| {
                    WorkloadError::UnknownPrefix {
                        scenario: spec.name.clone(),
                        prefix: name.clone(),
                    }
                })?;
                (Some(workload.prefix_id(sid, local)), spec.prefixes[local].len)
            }
            None => (None, 0),
        };
        out.push(Request::new(
            RequestId(rec.id),
            sid,
            rec.prompt_len,
            prefix,
            prefix_len,
            rec.output_len,
            rec.arrival,
        ));
    }
    Ok(out)
}

/// Measured prefill capability divided by measured decode capability, in
/// batches per second on each side. Balanced deployments return 1.
pub fn empirical_mismatch(log: &[Request], shape: &ClusterShape) -> Result<f64, WorkloadError> {
    let (mut tp_sum, mut td_sum, mut n) = (0.0, 0.0, 0usize);
    for req in log.iter().filter(|r| r.status() == RequestStatus::Done) {
        let ts = &req.timestamps;
        if let (Some(ps), Some(pe), Some(fin)) = (
            ts.get(Phase::PrefillStart),
            ts.get(Phase::PrefillEnd),
            ts.get(Phase::Finished),
        ) {
            tp_sum += pe - ps;
            td_sum += fin - pe;
            n += 1;
        }
    }
    if n == 0 {
        return Err(WorkloadError::EmptyLog);
    }
    let (tp, td) = (tp_sum / n as f64, td_sum / n as f64);
    let prefill = f64::from(shape.n_prefill) * f64::from(shape.batch_prefill) / tp;
    let decode = f64::from(shape.n_decode) * f64::from(shape.batch_decode) / td;
    Ok(prefill / decode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str) -> ScenarioSpec {
        ScenarioSpec {
            name: name.into(),
            prompt_len: DiscreteDist::new(vec![(512, 1.0), (1024, 2.0), (2048, 1.0)]).unwrap(),
            prefixes: vec![
                PrefixSpec {
                    name: format!("{name}-sys"),
                    len: 256,
                    weight: 3.0,
                },
                PrefixSpec {
                    name: format!("{name}-alt"),
                    len: 128,
                    weight: 1.0,
                },
            ],
            output_len: DiscreteDist::new(vec![(16, 1.0), (64, 1.0)]).unwrap(),
            ttft_slo: 1.0,
            e2e_timeout: 30.0,
        }
    }

    fn rates(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }

    #[test]
    fn zero_rate_yields_empty_trace() {
        let w = Workload::new(vec![spec("a")]).unwrap();
        let trace = TrafficTrace::constant(rates(&[("a", 0.0)]), 100.0);
        assert!(generate_trace(&w, &trace, 1).unwrap().is_empty());
    }

    #[test]
    fn poisson_count_and_replay() {
        let w = Workload::new(vec![spec("a")]).unwrap();
        let trace = TrafficTrace::constant(rates(&[("a", 10.0)]), 100.0);
        let reqs = generate_trace(&w, &trace, 42).unwrap();
        // Poisson(1000): sigma = sqrt(1000).
        let sigma = 1000f64.sqrt();
        assert!((reqs.len() as f64 - 1000.0).abs() < 3.0 * sigma, "count {}", reqs.len());
        assert_eq!(reqs, generate_trace(&w, &trace, 42).unwrap());
        assert!(reqs.windows(2).all(|p| p[0].arrival <= p[1].arrival));
        assert!(reqs.iter().enumerate().all(|(i, r)| r.id.0 == i as u64));
    }

    #[test]
    fn rate_ratio_converges() {
        let w = Workload::new(vec![spec("a"), spec("b")]).unwrap();
        let trace = TrafficTrace::constant(rates(&[("a", 25.0), ("b", 75.0)]), 100.0);
        let reqs = generate_trace(&w, &trace, 9).unwrap();
        let a = reqs.iter().filter(|r| r.scenario == ScenarioId(0)).count() as f64;
        let b = reqs.len() as f64 - a;
        assert!(reqs.len() > 9_000);
        assert!((b / a - 3.0).abs() < 0.2, "ratio {}", b / a);
    }

    #[test]
    fn adding_scenario_leaves_others_unchanged() {
        let trace = TrafficTrace::constant(rates(&[("a", 5.0), ("b", 5.0)]), 50.0);
        let only_a = generate_trace(&Workload::new(vec![spec("a")]).unwrap(), &TrafficTrace::constant(rates(&[("a", 5.0)]), 50.0), 3).unwrap();
        let both = generate_trace(&Workload::new(vec![spec("a"), spec("b")]).unwrap(), &trace, 3).unwrap();
        let a_arrivals: Vec<f64> = both.iter().filter(|r| r.scenario == ScenarioId(0)).map(|r| r.arrival).collect();
        assert_eq!(a_arrivals, only_a.iter().map(|r| r.arrival).collect::<Vec<_>>());
    }

    #[test]
    fn slot_boundaries_step_the_rate() {
        let w = Workload::new(vec![spec("a")]).unwrap();
        let trace = TrafficTrace {
            slots: vec![
                TrafficSlot {
                    start: 0.0,
                    rates: rates(&[("a", 50.0)]),
                },
                TrafficSlot {
                    start: 100.0,
                    rates: rates(&[("a", 0.0)]),
                },
            ],
            end: 200.0,
        };
        let reqs = generate_trace(&w, &trace, 5).unwrap();
        assert!(!reqs.is_empty());
        assert!(reqs.iter().all(|r| r.arrival < 100.0));
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(Workload::new(vec![]), Err(WorkloadError::NoScenarios)));
        let mut bad = spec("a");
        bad.prefixes[0].len = 512;
        assert!(matches!(Workload::new(vec![bad]), Err(WorkloadError::PrefixTooLong { .. })));
        let mut bad = spec("a");
        bad.ttft_slo = 40.0;
        assert!(matches!(Workload::new(vec![bad]), Err(WorkloadError::BadDeadlines(_))));
        assert!(DiscreteDist::new(vec![]).is_err());
        let w = Workload::new(vec![spec("a")]).unwrap();
        let trace = TrafficTrace::constant(rates(&[("zzz", 1.0)]), 10.0);
        assert!(matches!(generate_trace(&w, &trace, 1), Err(WorkloadError::UnknownScenario(_))));
    }

    #[test]
    fn trace_export_import_roundtrip() {
        let w = Workload::new(vec![spec("a"), spec("b")]).unwrap();
        let trace = TrafficTrace::constant(rates(&[("a", 2.0), ("b", 1.0)]), 20.0);
        let reqs = generate_trace(&w, &trace, 11).unwrap();
        let mut buf = Vec::new();
        export_trace(&w, &reqs, &mut buf).unwrap();
        let back = import_trace(&w, buf.as_slice()).unwrap();
        assert_eq!(back, reqs);
    }

    #[test]
    fn prefix_ids_resolve_globally() {
        let w = Workload::new(vec![spec("a"), spec("b")]).unwrap();
        let id = w.prefix_id(ScenarioId(1), 1);
        assert_eq!(id, PrefixId(3));
        let (sid, p) = w.prefix(id).unwrap();
        assert_eq!(sid, ScenarioId(1));
        assert_eq!(p.name, "b-alt");
        assert!(w.prefix(PrefixId(4)).is_none());
    }

    #[test]
    fn timestamps_enforce_phase_order() {
        let mut r = Request::new(RequestId(1), ScenarioId(0), 10, None, 0, 5, 1.0);
        r.timestamps.set(Phase::PrefillStart, 2.0).unwrap();
        assert!(r.timestamps.set(Phase::Accepted, 2.5).is_err());
        assert!(r.timestamps.set(Phase::PrefillEnd, 1.5).is_err());
        r.timestamps.set(Phase::PrefillEnd, 3.0).unwrap();
        r.finish(RequestStatus::Done, 4.0).unwrap();
        assert!(matches!(r.finish(RequestStatus::Failed, 5.0), Err(WorkloadError::AlreadyTerminal(1))));
        assert!(r.advance(RequestStatus::Decoding).is_err());
    }

    fn synthetic(tp: f64, td: f64) -> Request {
        let mut r = Request::new(RequestId(0), ScenarioId(0), 10, None, 0, 5, 0.0);
        r.timestamps.set(Phase::PrefillStart, 0.0).unwrap();
        r.timestamps.set(Phase::PrefillEnd, tp).unwrap();
        r.finish(RequestStatus::Done, tp + td).unwrap();
        r
    }

    #[test]
    fn mismatch_examples() {
        let shape = ClusterShape::new(2, 2, 4, 4).unwrap();
        let sym: Vec<_> = (0..10).map(|_| synthetic(1.0, 1.0)).collect();
        assert!((empirical_mismatch(&sym, &shape).unwrap() - 1.0).abs() < 1e-12);
        let fast: Vec<_> = (0..10).map(|_| synthetic(0.5, 1.0)).collect();
        assert!((empirical_mismatch(&fast, &shape).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(empirical_mismatch(&[], &shape), Err(WorkloadError::EmptyLog)));
    }
}
