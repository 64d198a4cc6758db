//! Deterministic discrete-event engine.
//!
//! Events fire in `(fire_time, sequence)` order, where `sequence` is the
//! insertion counter. Randomness comes from [`RngStreams`], which derives an
//! independent generator per component name from the run seed.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Exp};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("cannot schedule at {at} before current time {now}")]
    TimeTravel { at: f64, now: f64 },
    #[error("cannot run until {t_end} before current time {now}")]
    RunBackwards { t_end: f64, now: f64 },
    #[error("non-finite event time {0}")]
    NonFiniteTime(f64),
}

/// Cancellation handle returned by [`Engine::schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventHandle(u64);

#[derive(Debug, Clone)]
pub struct Scheduled<E> {
    pub fire_time: f64,
    pub sequence: u64,
    pub event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .fire_time
            .total_cmp(&self.fire_time)
            .then_with(|| other.sequence.cmp(&self.sequence))
    }
}

/// Virtual clock. Only the engine advances it.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimClock {
    now: f64,
}

impl SimClock {
    pub fn now(&self) -> f64 {
        self.now
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub dispatched: u64,
    pub cancelled_skipped: u64,
    pub end_time: f64,
    pub order_violations: u64,
}

#[derive(Debug)]
pub struct Engine<E> {
    clock: SimClock,
    next_seq: u64,
    queue: BinaryHeap<Scheduled<E>>,
    live: HashSet<u64>,
    cancelled: HashSet<u64>,
    last_dispatched: Option<(f64, u64)>,
    stats: RunStats,
}

impl<E> Default for Engine<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Engine<E> {
    pub fn new() -> Self {
        Self {
            clock: SimClock::default(),
            next_seq: 0,
            queue: BinaryHeap::new(),
            live: HashSet::new(),
            cancelled: HashSet::new(),
            last_dispatched: None,
            stats: RunStats::default(),
        }
    }

    pub fn now(&self) -> f64 {
        self.clock.now
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.live.len()
    }

    pub fn stats(&self) -> RunStats {
        self.stats
    }

    pub fn schedule(&mut self, at: f64, event: E) -> Result<EventHandle, SimError> {
        if !at.is_finite() {
            return Err(SimError::NonFiniteTime(at));
        }
        if at < self.clock.now {
            return Err(SimError::TimeTravel { at, now: self.clock.now });
        }
        let sequence = self.next_seq;
        self.next_seq += 1;
        self.live.insert(sequence);
        self.queue.push(Scheduled {
            fire_time: at,
            sequence,
            event,
        });
        Ok(EventHandle(sequence))
    }

    /// Schedules `delay` seconds from now. Negative delays are clamped to zero.
    pub fn schedule_in(&mut self, delay: f64, event: E) -> EventHandle {
        let at = self.clock.now + delay.max(0.0);
        self.schedule(at, event).expect("delay is non-negative and finite")
    }

    /// Cancels a queued event. Returns false if it already fired or was
    /// cancelled before.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if self.live.remove(&handle.0) {
            self.cancelled.insert(handle.0);
            true
        } else {
            false
        }
    }

    /// Pops the next live event with `fire_time <= t_end` and advances the
    /// clock to it.
    pub fn next_event(&mut self, t_end: f64) -> Option<Scheduled<E>> {
        loop {
            let head = self.queue.peek()?;
            if head.fire_time > t_end {
                return None;
            }
            let item = self.queue.pop().expect("peeked");
            if self.cancelled.remove(&item.sequence) {
                self.stats.cancelled_skipped += 1;
                continue;
            }
            self.live.remove(&item.sequence);
            if let Some((prev_time, prev_seq)) = self.last_dispatched {
                let out_of_order = item
                    .fire_time
                    .total_cmp(&prev_time)
                    .then(item.sequence.cmp(&prev_seq))
                    .is_lt();
                if out_of_order {
                    self.stats.order_violations += 1;
                }
            }
            self.last_dispatched = Some((item.fire_time, item.sequence));
            self.clock.now = item.fire_time;
            self.stats.dispatched += 1;
            return Some(item);
        }
    }

    /// Dispatches every event with `fire_time <= t_end` to `handler`, then
    /// sets the clock to exactly `t_end`.
    pub fn run_until<F>(&mut self, t_end: f64, mut handler: F) -> Result<RunStats, SimError>
    where
        F: FnMut(&mut Self, Scheduled<E>),
    {
        if t_end < self.clock.now {
            return Err(SimError::RunBackwards { t_end, now: self.clock.now });
        }
        while let Some(item) = self.next_event(t_end) {
            handler(self, item);
        }
        self.clock.now = t_end;
        self.stats.end_time = t_end;
        Ok(self.stats)
    }

    /// Moves the clock to `t_end` once the caller has drained events itself.
    pub fn advance_to(&mut self, t_end: f64) -> Result<(), SimError> {
        if t_end < self.clock.now {
            return Err(SimError::RunBackwards { t_end, now: self.clock.now });
        }
        self.clock.now = t_end;
        self.stats.end_time = t_end;
        Ok(())
    }
}

/// Per-component random streams derived from one run seed.
///
/// Each stream is seeded from `SHA-256(seed || name)`, so adding a component
/// never perturbs the draws of another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, component: &str) -> SimRng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(component.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        SimRng::from_seed(key)
    }
}

/// One line of the debug event log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub time: f64,
    pub seq: u64,
    pub kind: &'static str,
    pub detail: String,
}

/// Append-only record of dispatched events.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    enabled: bool,
    records: Vec<LogRecord>,
}

impl EventLog {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            records: Vec::new(),
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn push(&mut self, time: f64, seq: u64, kind: &'static str, detail: impl FnOnce() -> String) {
        if self.enabled {
            self.records.push(LogRecord {
                time,
                seq,
                kind,
                detail: detail(),
            });
        }
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    /// Writes the log as line-delimited JSON.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Non-negative random delay. Seconds at run time; config files give
/// milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayDist {
    Constant { value: f64 },
    Uniform { min: f64, max: f64 },
    Exponential { mean: f64 },
}

impl DelayDist {
    pub fn is_valid(&self) -> bool {
        match *self {
            DelayDist::Constant { value } => value.is_finite() && value >= 0.0,
            DelayDist::Uniform { min, max } => min.is_finite() && max.is_finite() && 0.0 <= min && min <= max,
            DelayDist::Exponential { mean } => mean.is_finite() && mean > 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DelayDist::Constant { value } => value,
            DelayDist::Uniform { min, max } => {
                if min == max {
                    min
                } else {
                    rng.random_range(min..max)
                }
            }
            DelayDist::Exponential { mean } => Exp::new(1.0 / mean).expect("validated").sample(rng),
        }
    }

    /// Same distribution with every time multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            DelayDist::Constant { value } => DelayDist::Constant { value: value * factor },
            DelayDist::Uniform { min, max } => DelayDist::Uniform {
                min: min * factor,
                max: max * factor,
            },
            DelayDist::Exponential { mean } => DelayDist::Exponential { mean: mean * factor },
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            DelayDist::Constant { value } => value,
            DelayDist::Uniform { min, max } => 0.5 * (min + max),
            DelayDist::Exponential { mean } => mean,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn drain(engine: &mut Engine<&'static str>, t_end: f64) -> Vec<(f64, &'static str)> {
        let mut fired = Vec::new();
        engine
            .run_until(t_end, |_, ev| fired.push((ev.fire_time, ev.event)))
            .unwrap();
        fired
    }

    #[test]
    fn schedule_at_now_fires_before_later() {
        let mut e = Engine::new();
        e.schedule(1.0, "later").unwrap();
        e.schedule(0.0, "now").unwrap();
        assert_eq!(drain(&mut e, 5.0), vec![(0.0, "now"), (1.0, "later")]);
    }

    #[test]
    fn same_time_fires_in_insertion_order() {
        let mut e = Engine::new();
        e.schedule(2.0, "a").unwrap();
        e.schedule(2.0, "b").unwrap();
        e.schedule(2.0, "c").unwrap();
        let order: Vec<_> = drain(&mut e, 2.0).into_iter().map(|(_, n)| n).collect();
        assert_eq!(order, vec!["a", "b", "c"]);
    }

    #[test]
    fn cancelled_event_never_fires() {
        let mut e = Engine::new();
        let h = e.schedule(1.0, "x").unwrap();
        e.schedule(1.5, "y").unwrap();
        assert!(e.cancel(h));
        assert!(!e.cancel(h));
        assert_eq!(drain(&mut e, 3.0), vec![(1.5, "y")]);
        assert_eq!(e.stats().cancelled_skipped, 1);
    }

    #[test]
    fn time_travel_rejected() {
        let mut e: Engine<&str> = Engine::new();
        drain(&mut e, 4.0);
        assert_eq!(
            e.schedule(3.0, "past"),
            Err(SimError::TimeTravel { at: 3.0, now: 4.0 })
        );
        assert!(e.run_until(1.0, |_, _| {}).is_err());
    }

    #[test]
    fn empty_queue_advances_clock_to_end() {
        let mut e: Engine<&str> = Engine::new();
        let stats = e.run_until(7.5, |_, _| {}).unwrap();
        assert_eq!(e.now(), 7.5);
        assert_eq!(stats.dispatched, 0);
    }

    #[test]
    fn run_until_now_only_dispatches_current_instant() {
        let mut e = Engine::new();
        e.schedule(0.0, "a").unwrap();
        e.schedule(0.0, "b").unwrap();
        e.schedule(1e-9, "c").unwrap();
        assert_eq!(drain(&mut e, 0.0).len(), 2);
        assert_eq!(e.pending(), 1);
    }

    #[test]
    fn handler_can_schedule_followups() {
        let mut e = Engine::new();
        e.schedule(0.0, 0u32).unwrap();
        let mut seen = Vec::new();
        e.run_until(10.0, |eng, ev| {
            seen.push(ev.fire_time);
            if ev.event < 3 {
                eng.schedule_in(1.0, ev.event + 1);
            }
        })
        .unwrap();
        assert_eq!(seen, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(e.stats().order_violations, 0);
    }

    #[test]
    fn streams_are_stable_and_independent() {
        let streams = RngStreams::new(42);
        let a1: Vec<u64> = (0..4).map(|_| 0).scan(streams.stream("a"), |r, _| Some(r.random())).collect();
        let a2: Vec<u64> = (0..4).map(|_| 0).scan(streams.stream("a"), |r, _| Some(r.random())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(streams.stream("b"), |r, _| Some(r.random())).collect();
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
        let other_seed: u64 = RngStreams::new(43).stream("a").random();
        assert_ne!(a1[0], other_seed);
    }

    #[test]
    fn replay_yields_identical_log() {
        fn run(seed: u64) -> Vec<u8> {
            let mut rng = RngStreams::new(seed).stream("test");
            let mut e = Engine::new();
            let mut log = EventLog::new(true);
            for i in 0..50u32 {
                e.schedule(rng.random_range(0.0..10.0), i).unwrap();
            }
            e.run_until(10.0, |eng, ev| {
                log.push(ev.fire_time, ev.sequence, "tick", || ev.event.to_string());
                if ev.event % 7 == 0 && eng.now() < 9.0 {
                    eng.schedule_in(0.5, ev.event + 1000);
                }
            })
            .unwrap();
            let mut buf = Vec::new();
            log.write_jsonl(&mut buf).unwrap();
            buf
        }
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }
}
