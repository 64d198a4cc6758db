//! Per-request outcomes and time-bucketed metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::workload::RequestStatus;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metrics CSV header does not match the expected columns")]
    Header,
    #[error("metrics CSV line {line}: {msg}")]
    Row { line: usize, msg: String },
}

/// Terminal record of one request.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestOutcome {
    pub id: u64,
    pub scenario: u32,
    pub group: Option<String>,
    pub arrival: f64,
    pub finish: f64,
    pub status: RequestStatus,
    /// Met both its TTFT and E2E deadlines.
    pub ok: bool,
    /// Arrival to end of prefill.
    pub tp: Option<f64>,
    /// End of prefill to finish, transfer included.
    pub td: Option<f64>,
    pub e2e: f64,
    pub transfer: Option<f64>,
    pub utilization: Option<f64>,
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransferRecord {
    pub done_at: f64,
    pub xi: f64,
    pub bytes: u64,
    pub utilization: f64,
    pub conflicts: u32,
}

/// Cluster state sampled at a bucket boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sample {
    pub t: f64,
    pub active_instances: u32,
    pub cache_hits: u64,
    pub cache_lookups: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub start: f64,
    pub end: f64,
    pub arrivals: u64,
    /// Requests finishing with every token delivered.
    pub completed: u64,
    /// Requests ending any other way.
    pub failed: u64,
    pub rps: f64,
    pub phi_per_instance: Option<f64>,
    pub success_rate: Option<f64>,
    pub tp: Option<f64>,
    pub td: Option<f64>,
    pub e2e: Option<f64>,
    pub tp_share: Option<f64>,
    pub transfer: Option<f64>,
    pub d2d_util: Option<f64>,
    pub cache_hit_rate: Option<f64>,
}

const COLUMNS: [&str; 15] = [
    "start",
    "end",
    "arrivals",
    "completed",
    "failed",
    "rps",
    "phi_per_instance",
    "success_rate",
    "tp",
    "td",
    "e2e",
    "tp_share",
    "transfer",
    "d2d_util",
    "cache_hit_rate",
];

impl MetricsRow {
    fn values(&self) -> [Option<f64>; 15] {
        [
            Some(self.start),
            Some(self.end),
            Some(self.arrivals as f64),
            Some(self.completed as f64),
            Some(self.failed as f64),
            Some(self.rps),
            self.phi_per_instance,
            self.success_rate,
            self.tp,
            self.td,
            self.e2e,
            self.tp_share,
            self.transfer,
            self.d2d_util,
            self.cache_hit_rate,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsFrame {
    pub bucket: f64,
    pub rows: Vec<MetricsRow>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (n, sum) = xs.into_iter().fold((0u64, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| sum / n as f64)
}

fn bucket_of(t: f64, bucket: f64, n: usize) -> Option<usize> {
    if t < 0.0 {
        return None;
    }
    let i = (t / bucket).floor() as usize;
    (i < n).then_some(i)
}

impl MetricsFrame {
    /// Buckets `[k * bucket, (k + 1) * bucket)` covering `[0, end)`.
    pub fn build(
        outcomes: &[RequestOutcome],
        arrivals: &[f64],
        transfers: &[TransferRecord],
        samples: &[Sample],
        bucket: f64,
        end: f64,
    ) -> Self {
        let n = (end / bucket).ceil().max(1.0) as usize;
        let mut rows: Vec<MetricsRow> = (0..n)
            .map(|k| MetricsRow {
                start: k as f64 * bucket,
                end: (k + 1) as f64 * bucket,
                arrivals: 0,
                completed: 0,
                failed: 0,
                rps: 0.0,
                phi_per_instance: None,
                success_rate: None,
                tp: None,
                td: None,
                e2e: None,
                tp_share: None,
                transfer: None,
                d2d_util: None,
                cache_hit_rate: None,
            })
            .collect();

        for &a in arrivals {
            if let Some(i) = bucket_of(a, bucket, n) {
                rows[i].arrivals += 1;
            }
        }
        let mut by_finish: Vec<Vec<&RequestOutcome>> = vec![Vec::new(); n];
        let mut by_arrival: Vec<(u64, u64)> = vec![(0, 0); n];
        for o in outcomes {
            if let Some(i) = bucket_of(o.finish, bucket, n) {
                by_finish[i].push(o);
            }
            if let Some(i) = bucket_of(o.arrival, bucket, n) {
                by_arrival[i].0 += 1;
                by_arrival[i].1 += u64::from(o.ok);
            }
        }
        let mut by_transfer: Vec<Vec<&TransferRecord>> = vec![Vec::new(); n];
        for t in transfers {
            if let Some(i) = bucket_of(t.done_at, bucket, n) {
                by_transfer[i].push(t);
            }
        }
        // Samples are taken at bucket ends; sample k closes bucket k.
        let mut prev_hits = 0u64;
        let mut prev_lookups = 0u64;
        for (k, row) in rows.iter_mut().enumerate() {
            let done: Vec<&&RequestOutcome> = by_finish[k]
                .iter()
                .filter(|o| o.status == RequestStatus::Done)
                .collect();
            row.completed = done.len() as u64;
            row.failed = by_finish[k].len() as u64 - row.completed;
            row.rps = row.completed as f64 / bucket;
            let (terminal, ok) = by_arrival[k];
            row.success_rate = (terminal > 0).then(|| ok as f64 / terminal as f64);
            row.tp = mean(done.iter().filter_map(|o| o.tp));
            row.td = mean(done.iter().filter_map(|o| o.td));
            row.e2e = mean(done.iter().map(|o| o.e2e));
            row.tp_share = match (row.tp, row.e2e) {
                (Some(tp), Some(e2e)) if e2e > 0.0 => Some(tp / e2e),
                _ => None,
            };
            row.transfer = mean(by_transfer[k].iter().map(|t| t.xi));
            row.d2d_util = mean(by_transfer[k].iter().map(|t| t.utilization));
            if let Some(s) = samples.get(k) {
                if s.active_instances > 0 {
                    row.phi_per_instance = Some(row.rps / f64::from(s.active_instances));
                }
                let lookups = s.cache_lookups - prev_lookups;
                if lookups > 0 {
                    row.cache_hit_rate = Some((s.cache_hits - prev_hits) as f64 / lookups as f64);
                }
                prev_hits = s.cache_hits;
                prev_lookups = s.cache_lookups;
            }
        }
        Self { bucket, rows }
    }

    /// CSV with a fixed header; undefined values are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = COLUMNS.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .values()
                .iter()
                .map(|v| v.map(|x| x.to_string()).unwrap_or_default())
                .collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    /// Parses the output of [`MetricsFrame::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(COLUMNS.join(",").as_str()) {
            return Err(MetricsError::Header);
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line_no = i + 2;
            let err = |msg: String| MetricsError::Row { line: line_no, msg };
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != COLUMNS.len() {
                return Err(err(format!("expected {} cells, found {}", COLUMNS.len(), cells.len())));
            }
            let mut v = [None; 15];
            for (slot, (cell, name)) in v.iter_mut().zip(cells.iter().zip(COLUMNS)) {
                if !cell.is_empty() {
                    *slot = Some(cell.parse::<f64>().map_err(|e| err(format!("{name}: {e}")))?);
                }
            }
            let req = |k: usize| v[k].ok_or_else(|| err(format!("{} is empty", COLUMNS[k])));
            rows.push(MetricsRow {
                start: req(0)?,
                end: req(1)?,
                arrivals: req(2)? as u64,
                completed: req(3)? as u64,
                failed: req(4)? as u64,
                rps: req(5)?,
                phi_per_instance: v[6],
                success_rate: v[7],
                tp: v[8],
                td: v[9],
                e2e: v[10],
                tp_share: v[11],
                transfer: v[12],
                d2d_util: v[13],
                cache_hit_rate: v[14],
            });
        }
        let bucket = rows.first().map_or(1.0, |r| r.end - r.start);
        Ok(Self { bucket, rows })
    }

    /// Each column divided by its largest absolute value, for presentation
    /// on a 0..1 scale. Stored frames are never normalized.
    pub fn normalized(&self) -> Self {
        let mut maxes = [0.0f64; 15];
        for row in &self.rows {
            for (m, v) in maxes.iter_mut().zip(row.values()) {
                if let Some(v) = v {
                    *m = m.max(v.abs());
                }
            }
        }
        let scale = |v: Option<f64>, m: f64| v.map(|x| if m > 0.0 { x / m } else { x });
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let v = r.values();
                MetricsRow {
                    start: r.start,
                    end: r.end,
                    arrivals: r.arrivals,
                    completed: r.completed,
                    failed: r.failed,
                    rps: scale(v[5], maxes[5]).unwrap_or(0.0),
                    phi_per_instance: scale(v[6], maxes[6]),
                    success_rate: v[7],
                    tp: scale(v[8], maxes[8]),
                    td: scale(v[9], maxes[9]),
                    e2e: scale(v[10], maxes[10]),
                    tp_share: v[11],
                    transfer: scale(v[12], maxes[12]),
                    d2d_util: v[13],
                    cache_hit_rate: v[14],
                }
            })
            .collect();
        Self {
            bucket: self.bucket,
            rows,
        }
    }
}

/// Whole-run figures over the steady window `[from, to)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub from: f64,
    pub to: f64,
    pub arrivals: u64,
    pub terminal: u64,
    pub ok: u64,
    pub success_rate: Option<f64>,
    /// Completions per second finishing inside the window.
    pub throughput: f64,
    /// Completions that met both deadlines, per second.
    pub goodput: f64,
    pub mean_instances: f64,
    pub per_instance_rps: Option<f64>,
    pub tp: Option<f64>,
    pub td: Option<f64>,
    pub e2e: Option<f64>,
    pub tp_share: Option<f64>,
    pub transfer_mean: Option<f64>,
    pub transfer_var: Option<f64>,
    pub d2d_util: Option<f64>,
    pub cache_hit_rate: Option<f64>,
    pub timeouts_ttft: u64,
    pub timeouts_e2e: u64,
    pub failed: u64,
}

impl Summary {
    pub fn build(
        outcomes: &[RequestOutcome],
        transfers: &[TransferRecord],
        samples: &[Sample],
        from: f64,
        to: f64,
    ) -> Self {
        let arrived: Vec<&RequestOutcome> = outcomes.iter().filter(|o| o.arrival >= from && o.arrival < to).collect();
        let ok_arrivals = arrived.iter().filter(|o| o.ok).count() as u64;
        let finished: Vec<&RequestOutcome> = outcomes
            .iter()
            .filter(|o| o.status == RequestStatus::Done && o.finish >= from && o.finish < to)
            .collect();
        let span = to - from;
        let rate = |n: usize| if span > 0.0 { n as f64 / span } else { 0.0 };
        let throughput = rate(finished.len());
        let goodput = rate(finished.iter().filter(|o| o.ok).count());
        let window: Vec<&Sample> = samples.iter().filter(|s| s.t > from && s.t <= to).collect();
        let mean_instances = mean(window.iter().map(|s| f64::from(s.active_instances))).unwrap_or(0.0);
        let tp = mean(finished.iter().filter_map(|o| o.tp));
        let e2e = mean(finished.iter().map(|o| o.e2e));
        let xfer: Vec<f64> = transfers
            .iter()
            .filter(|t| t.done_at >= from && t.done_at < to)
            .map(|t| t.xi)
            .collect();
        let transfer_mean = mean(xfer.iter().copied());
        let transfer_var = transfer_mean.filter(|_| xfer.len() > 1).map(|m| {
            xfer.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xfer.len() - 1) as f64
        });
        let (hits, lookups) = match (window.first(), window.last()) {
            (Some(_), Some(last)) => {
                let base = samples.iter().rfind(|s| s.t <= from);
                let h0 = base.map_or(0, |s| s.cache_hits);
                let l0 = base.map_or(0, |s| s.cache_lookups);
                (last.cache_hits - h0, last.cache_lookups - l0)
            }
            _ => (0, 0),
        };
        let count = |st: RequestStatus| arrived.iter().filter(|o| o.status == st).count() as u64;
        Self {
            from,
            to,
            arrivals: arrived.len() as u64,
            terminal: arrived.len() as u64,
            ok: ok_arrivals,
            success_rate: (!arrived.is_empty()).then(|| ok_arrivals as f64 / arrived.len() as f64),
            throughput,
            goodput,
            mean_instances,
            per_instance_rps: (mean_instances > 0.0).then(|| throughput / mean_instances),
            tp,
            td: mean(finished.iter().filter_map(|o| o.td)),
            e2e,
            tp_share: match (tp, e2e) {
                (Some(a), Some(b)) if b > 0.0 => Some(a / b),
                _ => None,
            },
            transfer_mean,
            transfer_var,
            d2d_util: mean(
                transfers
                    .iter()
                    .filter(|t| t.done_at >= from && t.done_at < to)
                    .map(|t| t.utilization),
            ),
            cache_hit_rate: (lookups > 0).then(|| hits as f64 / lookups as f64),
            timeouts_ttft: count(RequestStatus::TimeoutTtft),
            timeouts_e2e: count(RequestStatus::TimeoutE2e),
            failed: count(RequestStatus::Failed),
        }
    }
}

/// Nearest-rank summary of a sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Distribution {
    pub count: u64,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let rank = |q: f64| sorted[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        Some(Self {
            count: n as u64,
            mean: sorted.iter().sum::<f64>() / n as f64,
            p50: rank(0.5),
            p90: rank(0.9),
            p99: rank(0.99),
            max: sorted[n - 1],
        })
    }
}

/// Outcomes of one scenario's requests that arrived in `[from, to)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioStats {
    pub name: String,
    pub arrivals: u64,
    pub ok: u64,
    pub success_rate: Option<f64>,
    /// Arrival to prefill end, over requests that finished prefill.
    pub ttft: Option<Distribution>,
    /// Requests by number of forwarding attempts.
    pub attempts: BTreeMap<u32, u64>,
}

impl ScenarioStats {
    /// One entry per scenario, indexed like `names`.
    pub fn build(outcomes: &[RequestOutcome], names: &[String], from: f64, to: f64) -> Vec<Self> {
        names
            .iter()
            .enumerate()
            .map(|(sid, name)| {
                let mine: Vec<&RequestOutcome> = outcomes
                    .iter()
                    .filter(|o| o.scenario as usize == sid && o.arrival >= from && o.arrival < to)
                    .collect();
                let ok = mine.iter().filter(|o| o.ok).count() as u64;
                let ttft: Vec<f64> = mine.iter().filter_map(|o| o.tp).collect();
                let mut attempts = BTreeMap::new();
                for o in &mine {
                    *attempts.entry(o.attempts).or_default() += 1;
                }
                Self {
                    name: name.clone(),
                    arrivals: mine.len() as u64,
                    ok,
                    success_rate: (!mine.is_empty()).then(|| ok as f64 / mine.len() as f64),
                    ttft: Distribution::of(&ttft),
                    attempts,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let outcomes = [outcome(0.5, 1.5, true), outcome(1.2, 3.1, false)];
        let frame = MetricsFrame::build(&outcomes, &[0.5, 1.2, 2.2], &[], &[], 1.0, 4.0);
        let parsed = MetricsFrame::from_csv(&frame.to_csv()).unwrap();
        assert_eq!(parsed, frame);
        assert_eq!(MetricsFrame::from_csv("a,b\n"), Err(MetricsError::Header));
        let bad = format!("{}\n1,2,3\n", COLUMNS.join(","));
        assert!(matches!(MetricsFrame::from_csv(&bad), Err(MetricsError::Row { line: 2, .. })));
    }

    fn outcome(arrival: f64, finish: f64, ok: bool) -> RequestOutcome {
        RequestOutcome {
            id: 0,
            scenario: 0,
            group: None,
            arrival,
            finish,
            status: if ok { RequestStatus::Done } else { RequestStatus::TimeoutTtft },
            ok,
            tp: ok.then_some(0.5),
            td: ok.then_some(1.5),
            e2e: finish - arrival,
            transfer: None,
            utilization: None,
            attempts: 1,
        }
    }

    #[test]
    fn empty_run_reports_null_success() {
        let f = MetricsFrame::build(&[], &[], &[], &[], 10.0, 30.0);
        assert_eq!(f.rows.len(), 3);
        assert!(f.rows.iter().all(|r| r.success_rate.is_none() && r.rps == 0.0));
        let csv = f.to_csv();
        assert!(csv.starts_with("start,end,arrivals"));
        assert!(csv.lines().nth(1).unwrap().starts_with("0,10,0,0,0,0,,"));
    }

    #[test]
    fn buckets_and_shares() {
        let outs = vec![outcome(1.0, 3.0, true), outcome(2.0, 12.0, true), outcome(3.0, 4.0, false)];
        let samples = vec![
            Sample { t: 10.0, active_instances: 2, cache_hits: 1, cache_lookups: 2 },
            Sample { t: 20.0, active_instances: 2, cache_hits: 1, cache_lookups: 2 },
        ];
        let f = MetricsFrame::build(&outs, &[1.0, 2.0, 3.0], &[], &samples, 10.0, 20.0);
        assert_eq!(f.rows[0].arrivals, 3);
        assert_eq!(f.rows[0].completed, 1);
        assert_eq!(f.rows[0].failed, 1);
        assert_eq!(f.rows[0].success_rate, Some(2.0 / 3.0));
        assert_eq!(f.rows[0].phi_per_instance, Some(0.05));
        assert_eq!(f.rows[0].tp_share, Some(0.25));
        assert_eq!(f.rows[0].cache_hit_rate, Some(0.5));
        assert_eq!(f.rows[1].cache_hit_rate, None);
        assert_eq!(f.rows[1].completed, 1);
    }

    #[test]
    fn normalization_is_separate() {
        let outs = vec![outcome(1.0, 3.0, true), outcome(11.0, 12.0, true), outcome(12.0, 13.0, true)];
        let f = MetricsFrame::build(&outs, &[], &[], &[], 10.0, 20.0);
        let n = f.normalized();
        assert_eq!(n.rows[1].rps, 1.0);
        assert_eq!(n.rows[0].rps, 0.5);
        assert_eq!(f.rows[1].rps, 0.2);
    }

    #[test]
    fn summary_window() {
        let outs = vec![outcome(1.0, 3.0, true), outcome(12.0, 14.0, true), outcome(13.0, 14.0, false)];
        let s = Summary::build(&outs, &[], &[], 10.0, 20.0);
        assert_eq!(s.arrivals, 2);
        assert_eq!(s.success_rate, Some(0.5));
        assert!((s.throughput - 0.1).abs() < 1e-12);
    }

    #[test]
    fn nearest_rank_quantiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let d = Distribution::of(&v).unwrap();
        assert_eq!((d.p50, d.p90, d.p99, d.max), (50.0, 90.0, 99.0, 100.0));
        assert_eq!(d.mean, 50.5);
        assert!(Distribution::of(&[]).is_none());
    }

    #[test]
    fn scenario_stats_split_by_scenario() {
        let mut a = outcome(1.0, 3.0, true);
        a.attempts = 2;
        let mut b = outcome(2.0, 4.0, false);
        b.scenario = 1;
        let stats = ScenarioStats::build(&[a, b], &["x".into(), "y".into(), "z".into()], 0.0, 10.0);
        assert_eq!(stats[0].success_rate, Some(1.0));
        assert_eq!(stats[0].attempts[&2], 1);
        assert_eq!(stats[0].ttft.as_ref().unwrap().p50, 0.5);
        assert_eq!(stats[1].success_rate, Some(0.0));
        assert!(stats[1].ttft.is_none());
        assert_eq!(stats[2].success_rate, None);
    }
}
