//! Analytic end-to-end performance model for a disaggregated prefill/decode
//! deployment.
//!
//! Per-instance throughput is bounded by the weakest of three stages:
//!
//! ```text
//! phi = min(input_traffic, n_p * b_p / T_p, n_d * b_d / T_d) / (n_p + n_d)
//! T_p = TTFT(b_p) * r_pre
//! T_d = xi + TPOT(b_d) * G
//! ```
//!
//! Latencies come from measured tables indexed by batch size; batch sizes
//! between two tabulated points are linearly interpolated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerfError {
    #[error("batch size {batch} outside tabulated range [{min}, {max}]")]
    BatchOutOfRange { batch: u32, min: u32, max: u32 },
    #[error("latency table is empty")]
    EmptyTable,
    #[error("latency table must be strictly increasing in batch size and non-decreasing in latency")]
    NonMonotoneTable,
    #[error("invalid latency {0}: must be finite and positive")]
    InvalidLatency(f64),
    #[error("prefix benefit {0} outside (0, 1]")]
    InvalidPrefixBenefit(f64),
    #[error("mean generated tokens {0} must be at least 1")]
    InvalidGeneratedTokens(f64),
    #[error("transfer time {0} must be finite and non-negative")]
    InvalidTransferTime(f64),
    #[error("cluster shape fields must all be at least 1")]
    InvalidShape,
    #[error("need at least 2 instances to split into prefill and decode, got {0}")]
    TooFewInstances(u32),
    #[error("input traffic {0} must be finite and non-negative")]
    InvalidTraffic(f64),
    #[error("input traffic must be positive to size prefill capacity")]
    ZeroTraffic,
    #[error("kvcache size arguments must all be at least 1")]
    ZeroDimension,
    #[error("kvcache size overflows u64")]
    Overflow,
}

/// Latency measured at a set of batch sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u32, f64)>", into = "Vec<(u32, f64)>")]
pub struct LatencyTable {
    points: Vec<(u32, f64)>,
}

impl LatencyTable {
    /// Builds a table from `(batch, seconds)` points. Points are sorted by
    /// batch; latencies must be non-decreasing once sorted.
    pub fn new(mut points: Vec<(u32, f64)>) -> Result<Self, PerfError> {
        if points.is_empty() {
            return Err(PerfError::EmptyTable);
        }
        points.sort_by_key(|&(b, _)| b);
        for &(b, t) in &points {
            if b == 0 {
                return Err(PerfError::NonMonotoneTable);
            }
            if !t.is_finite() || t <= 0.0 {
                return Err(PerfError::InvalidLatency(t));
            }
        }
        for w in points.windows(2) {
            if w[0].0 == w[1].0 || w[1].1 < w[0].1 {
                return Err(PerfError::NonMonotoneTable);
            }
        }
        Ok(Self { points })
    }

    pub fn min_batch(&self) -> u32 {
        self.points[0].0
    }

    pub fn max_batch(&self) -> u32 {
        self.points[self.points.len() - 1].0
    }

    pub fn points(&self) -> &[(u32, f64)] {
        &self.points
    }

    /// True when `batch` is tabulated or bracketed by two tabulated points.
    pub fn covers(&self, batch: u32) -> bool {
        batch >= self.min_batch() && batch <= self.max_batch()
    }

    pub fn lookup(&self, batch: u32) -> Result<f64, PerfError> {
        if !self.covers(batch) {
            return Err(PerfError::BatchOutOfRange {
                batch,
                min: self.min_batch(),
                max: self.max_batch(),
            });
        }
        let idx = self.points.partition_point(|&(b, _)| b < batch);
        let (b1, t1) = self.points[idx];
        if b1 == batch {
            return Ok(t1);
        }
        let (b0, t0) = self.points[idx - 1];
        let frac = f64::from(batch - b0) / f64::from(b1 - b0);
        Ok(t0 + frac * (t1 - t0))
    }

    /// Multiplies every latency by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            points: self.points.iter().map(|&(b, t)| (b, t * factor)).collect(),
        }
    }
}

impl TryFrom<Vec<(u32, f64)>> for LatencyTable {
    type Error = PerfError;

    fn try_from(points: Vec<(u32, f64)>) -> Result<Self, Self::Error> {
        Self::new(points)
    }
}

impl From<LatencyTable> for Vec<(u32, f64)> {
    fn from(table: LatencyTable) -> Self {
        table.points
    }
}

/// Per-scenario latency characteristics.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfProfile {
    ttft_by_batch: LatencyTable,
    tpot_by_batch: LatencyTable,
    prefix_benefit: f64,
    mean_generated_tokens: f64,
    transfer_time: f64,
}

impl PerfProfile {
    pub fn new(
        ttft_by_batch: LatencyTable,
        tpot_by_batch: LatencyTable,
        prefix_benefit: f64,
        mean_generated_tokens: f64,
        transfer_time: f64,
    ) -> Result<Self, PerfError> {
        if !(prefix_benefit > 0.0 && prefix_benefit <= 1.0) {
            return Err(PerfError::InvalidPrefixBenefit(prefix_benefit));
        }
        if !(mean_generated_tokens >= 1.0) || !mean_generated_tokens.is_finite() {
            return Err(PerfError::InvalidGeneratedTokens(mean_generated_tokens));
        }
        if !(transfer_time >= 0.0) || !transfer_time.is_finite() {
            return Err(PerfError::InvalidTransferTime(transfer_time));
        }
        Ok(Self {
            ttft_by_batch,
            tpot_by_batch,
            prefix_benefit,
            mean_generated_tokens,
            transfer_time,
        })
    }

    pub fn ttft(&self) -> &LatencyTable {
        &self.ttft_by_batch
    }

    pub fn tpot(&self) -> &LatencyTable {
        &self.tpot_by_batch
    }

    pub fn prefix_benefit(&self) -> f64 {
        self.prefix_benefit
    }

    pub fn mean_generated_tokens(&self) -> f64 {
        self.mean_generated_tokens
    }

    pub fn transfer_time(&self) -> f64 {
        self.transfer_time
    }

    pub fn with_transfer_time(mut self, transfer_time: f64) -> Result<Self, PerfError> {
        if !(transfer_time >= 0.0) || !transfer_time.is_finite() {
            return Err(PerfError::InvalidTransferTime(transfer_time));
        }
        self.transfer_time = transfer_time;
        Ok(self)
    }

    /// Same profile with both latency tables multiplied by `factor`.
    pub fn time_scaled(&self, factor: f64) -> Self {
        Self {
            ttft_by_batch: self.ttft_by_batch.scaled(factor),
            tpot_by_batch: self.tpot_by_batch.scaled(factor),
            transfer_time: self.transfer_time * factor,
            ..self.clone()
        }
    }
}

/// Instance counts and batch sizes for one P/D deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClusterShape {
    pub n_prefill: u32,
    pub n_decode: u32,
    pub batch_prefill: u32,
    pub batch_decode: u32,
}

impl ClusterShape {
    pub fn new(
        n_prefill: u32,
        n_decode: u32,
        batch_prefill: u32,
        batch_decode: u32,
    ) -> Result<Self, PerfError> {
        let shape = Self {
            n_prefill,
            n_decode,
            batch_prefill,
            batch_decode,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        if self.n_prefill == 0 || self.n_decode == 0 || self.batch_prefill == 0 || self.batch_decode == 0 {
            return Err(PerfError::InvalidShape);
        }
        Ok(())
    }

    pub fn total_instances(&self) -> u32 {
        self.n_prefill + self.n_decode
    }
}

/// Which stage limits throughput.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bottleneck {
    Traffic,
    Prefill,
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputEstimate {
    /// Requests per second per instance.
    pub per_instance_rps: f64,
    pub bottleneck: Bottleneck,
    pub t_p: f64,
    pub t_d: f64,
    pub e2e: f64,
    /// Aggregate prefill capability, requests per second.
    pub prefill_capacity: f64,
    /// Aggregate decode capability, requests per second.
    pub decode_capacity: f64,
}

/// Effective prefill latency `T_p` at the given batch size.
pub fn phase_latency_prefill(profile: &PerfProfile, batch: u32) -> Result<f64, PerfError> {
    Ok(profile.ttft_by_batch.lookup(batch)? * profile.prefix_benefit)
}

/// Effective decode latency `T_d` at the given batch size, including transfer.
pub fn phase_latency_decode(profile: &PerfProfile, batch: u32) -> Result<f64, PerfError> {
    Ok(profile.transfer_time + profile.tpot_by_batch.lookup(batch)? * profile.mean_generated_tokens)
}

/// Per-instance throughput and the stage that bounds it.
///
/// Ties resolve in the order traffic, prefill, decode.
pub fn cluster_throughput(
    profile: &PerfProfile,
    shape: &ClusterShape,
    input_traffic: f64,
) -> Result<ThroughputEstimate, PerfError> {
    shape.validate()?;
    if !(input_traffic >= 0.0) || input_traffic.is_nan() {
        return Err(PerfError::InvalidTraffic(input_traffic));
    }
    let t_p = phase_latency_prefill(profile, shape.batch_prefill)?;
    let t_d = phase_latency_decode(profile, shape.batch_decode)?;
    let prefill_capacity = f64::from(shape.n_prefill) * f64::from(shape.batch_prefill) / t_p;
    let decode_capacity = f64::from(shape.n_decode) * f64::from(shape.batch_decode) / t_d;

    let (bound, bottleneck) = if input_traffic <= prefill_capacity && input_traffic <= decode_capacity {
        (input_traffic, Bottleneck::Traffic)
    } else if prefill_capacity <= decode_capacity {
        (prefill_capacity, Bottleneck::Prefill)
    } else {
        (decode_capacity, Bottleneck::Decode)
    };

    Ok(ThroughputEstimate {
        per_instance_rps: bound / f64::from(shape.total_instances()),
        bottleneck,
        t_p,
        t_d,
        e2e: t_p + t_d,
        prefill_capacity,
        decode_capacity,
    })
}

/// Integer prefill/decode split of `total_instances` that minimizes the
/// capability mismatch `|n_p * b_p / T_p - n_d * b_d / T_d|`.
///
/// The mismatch is the absolute value of a linear function of `n_p`, so the
/// optimum sits at the floor or ceiling of its root. Ties prefer more decode
/// instances, since decoding holds requests for much longer.
pub fn optimal_pd_ratio(
    profile: &PerfProfile,
    batch_prefill: u32,
    batch_decode: u32,
    total_instances: u32,
) -> Result<ClusterShape, PerfError> {
    if total_instances < 2 {
        return Err(PerfError::TooFewInstances(total_instances));
    }
    if batch_prefill == 0 || batch_decode == 0 {
        return Err(PerfError::InvalidShape);
    }
    let per_prefill = f64::from(batch_prefill) / phase_latency_prefill(profile, batch_prefill)?;
    let per_decode = f64::from(batch_decode) / phase_latency_decode(profile, batch_decode)?;
    let total = f64::from(total_instances);
    let mismatch = |n_p: u32| (f64::from(n_p) * per_prefill - f64::from(total_instances - n_p) * per_decode).abs();

    let root = total * per_decode / (per_prefill + per_decode);
    let clamp = |x: f64| (x.max(1.0).min(total - 1.0)) as u32;
    let lo = clamp(root.floor());
    let hi = clamp(root.ceil());
    let n_prefill = if mismatch(hi) < mismatch(lo) { hi } else { lo };

    ClusterShape::new(n_prefill, total_instances - n_prefill, batch_prefill, batch_decode)
}

/// Smallest prefill instance count whose capability covers `input_traffic`.
pub fn required_prefill_count(
    profile: &PerfProfile,
    batch_prefill: u32,
    input_traffic: f64,
) -> Result<u32, PerfError> {
    if !input_traffic.is_finite() || input_traffic < 0.0 {
        return Err(PerfError::InvalidTraffic(input_traffic));
    }
    if input_traffic == 0.0 {
        return Err(PerfError::ZeroTraffic);
    }
    if batch_prefill == 0 {
        return Err(PerfError::InvalidShape);
    }
    let per_instance = f64::from(batch_prefill) / phase_latency_prefill(profile, batch_prefill)?;
    let mut n = (input_traffic / per_instance).ceil().max(1.0) as u32;
    // Guard against the quotient rounding just above an integer.
    while n > 1 && f64::from(n - 1) * per_instance >= input_traffic {
        n -= 1;
    }
    while f64::from(n) * per_instance < input_traffic {
        n += 1;
    }
    Ok(n)
}

/// KVCache bytes for `query_len` tokens across `num_layers` layers; the
/// factor 2 accounts for the K and V tensors.
pub fn kvcache_size_bytes(
    batch: u64,
    hidden_size: u64,
    query_len: u64,
    num_layers: u64,
    bytes_per_elem: u64,
) -> Result<u64, PerfError> {
    if [batch, hidden_size, query_len, num_layers, bytes_per_elem].contains(&0) {
        return Err(PerfError::ZeroDimension);
    }
    [batch, hidden_size, 2, query_len, num_layers]
        .iter()
        .try_fold(bytes_per_elem, |acc, &x| acc.checked_mul(x))
        .ok_or(PerfError::Overflow)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(points: &[(u32, f64)]) -> LatencyTable {
        LatencyTable::new(points.to_vec()).unwrap()
    }

    fn profile(ttft: &[(u32, f64)], tpot: &[(u32, f64)], r_pre: f64, g: f64, xi: f64) -> PerfProfile {
        PerfProfile::new(table(ttft), table(tpot), r_pre, g, xi).unwrap()
    }

    /// Capability-balanced profile: per-instance prefill = b_p / tp, decode = b_d / (tpot * g).
    fn caps(tp: f64, bp: u32, td: f64, bd: u32) -> PerfProfile {
        profile(&[(bp, tp)], &[(bd, td)], 1.0, 1.0, 0.0)
    }

    #[test]
    fn prefill_latency_examples() {
        let p = profile(&[(1, 0.5)], &[(1, 0.01)], 1.0, 1.0, 0.0);
        assert_eq!(phase_latency_prefill(&p, 1).unwrap(), 0.5);

        let p = profile(&[(4, 1.0)], &[(1, 0.01)], 0.6, 1.0, 0.0);
        assert!((phase_latency_prefill(&p, 4).unwrap() - 0.6).abs() < 1e-12);

        // Interpolation oracle: 0.5 + (2-1)/(4-1) * (1.0-0.5).
        let p = profile(&[(1, 0.5), (4, 1.0)], &[(1, 0.01)], 1.0, 1.0, 0.0);
        let oracle = 0.5 + (1.0 / 3.0) * 0.5;
        assert!((phase_latency_prefill(&p, 2).unwrap() - oracle).abs() < 1e-12);
        assert!((oracle - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn prefill_latency_out_of_range() {
        let p = profile(&[(2, 0.5), (4, 1.0)], &[(1, 0.01)], 1.0, 1.0, 0.0);
        assert!(matches!(
            phase_latency_prefill(&p, 1),
            Err(PerfError::BatchOutOfRange { batch: 1, min: 2, max: 4 })
        ));
        assert!(matches!(phase_latency_prefill(&p, 5), Err(PerfError::BatchOutOfRange { .. })));
    }

    #[test]
    fn decode_latency_examples() {
        let p = profile(&[(1, 0.5)], &[(8, 0.05)], 1.0, 1.0, 0.0);
        assert!((phase_latency_decode(&p, 8).unwrap() - 0.05).abs() < 1e-12);

        let p = profile(&[(1, 0.5)], &[(8, 0.05)], 1.0, 100.0, 0.02);
        assert!((phase_latency_decode(&p, 8).unwrap() - 5.02).abs() < 1e-9);

        assert_eq!(
            PerfProfile::new(table(&[(1, 0.5)]), table(&[(8, 0.05)]), 1.0, 0.0, 0.02),
            Err(PerfError::InvalidGeneratedTokens(0.0))
        );
    }

    #[test]
    fn throughput_examples() {
        let p = caps(1.0, 1, 1.0, 1);
        let shape = ClusterShape::new(1, 1, 1, 1).unwrap();
        let est = cluster_throughput(&p, &shape, 0.0).unwrap();
        assert_eq!(est.per_instance_rps, 0.0);
        assert_eq!(est.bottleneck, Bottleneck::Traffic);

        // min(100, 2*4/1, 3*8/2) / 5 = 8 / 5.
        let p = caps(1.0, 4, 2.0, 8);
        let shape = ClusterShape::new(2, 3, 4, 8).unwrap();
        let est = cluster_throughput(&p, &shape, 100.0).unwrap();
        assert!((est.per_instance_rps - 1.6).abs() < 1e-12);
        assert_eq!(est.bottleneck, Bottleneck::Prefill);
        assert!((est.e2e - (est.t_p + est.t_d)).abs() < 1e-12);

        let p = caps(1.0, 1, 1.0, 1);
        let shape = ClusterShape::new(1, 1, 1, 1).unwrap();
        let est = cluster_throughput(&p, &shape, 1.0).unwrap();
        assert!((est.per_instance_rps - 0.5).abs() < 1e-12);
        assert_eq!(est.bottleneck, Bottleneck::Traffic);
    }

    #[test]
    fn prefill_decode_tie_labels_prefill() {
        let p = caps(1.0, 1, 1.0, 1);
        let shape = ClusterShape::new(1, 1, 1, 1).unwrap();
        let est = cluster_throughput(&p, &shape, 10.0).unwrap();
        assert_eq!(est.bottleneck, Bottleneck::Prefill);
    }

    #[test]
    fn ratio_examples() {
        let p = caps(1.0, 1, 1.0, 1);
        let s = optimal_pd_ratio(&p, 1, 1, 4).unwrap();
        assert_eq!((s.n_prefill, s.n_decode), (2, 2));

        let p = caps(1.0, 1, 4.0, 2);
        let s = optimal_pd_ratio(&p, 1, 2, 6).unwrap();
        assert_eq!((s.n_prefill, s.n_decode), (2, 4));

        let p = caps(1.0, 10, 1.0, 1);
        let s = optimal_pd_ratio(&p, 10, 1, 4).unwrap();
        assert_eq!((s.n_prefill, s.n_decode), (1, 3));

        assert_eq!(optimal_pd_ratio(&p, 10, 1, 1), Err(PerfError::TooFewInstances(1)));
    }

    #[test]
    fn ratio_tie_prefers_decode() {
        // per-prefill 1, per-decode 1, total 3: splits (1,2) and (2,1) both mismatch by 1.
        let p = caps(1.0, 1, 1.0, 1);
        let s = optimal_pd_ratio(&p, 1, 1, 3).unwrap();
        assert_eq!((s.n_prefill, s.n_decode), (1, 2));
    }

    #[test]
    fn required_prefill_examples() {
        let p = caps(1.0, 4, 1.0, 1);
        assert_eq!(required_prefill_count(&p, 4, 4.0).unwrap(), 1);
        assert_eq!(required_prefill_count(&p, 4, 9.0).unwrap(), 3);
        let p = caps(2.0, 1, 1.0, 1);
        assert_eq!(required_prefill_count(&p, 1, 0.5).unwrap(), 1);
        assert_eq!(required_prefill_count(&p, 1, 0.0), Err(PerfError::ZeroTraffic));
    }

    #[test]
    fn required_prefill_rounding_edges() {
        // 0.1-second prefill, batch 1 => 10 rps per instance; 0.3 / 0.1 is inexact in f64.
        let p = caps(0.1, 1, 1.0, 1);
        assert_eq!(required_prefill_count(&p, 1, 30.0).unwrap(), 3);
        assert_eq!(required_prefill_count(&p, 1, 30.000001).unwrap(), 4);
    }

    #[test]
    fn kvcache_examples() {
        // GPT-3 175B: 4.5 MiB per token, 4.5 GiB per 1k-token prompt.
        assert_eq!(kvcache_size_bytes(1, 12288, 1, 96, 2).unwrap(), 4_718_592);
        assert_eq!(kvcache_size_bytes(1, 12288, 1, 96, 2).unwrap(), 9 * (1 << 19));
        assert_eq!(kvcache_size_bytes(1, 12288, 1024, 96, 2).unwrap(), 9 * (1u64 << 29));
        assert_eq!(kvcache_size_bytes(1, 1, 1, 1, 1).unwrap(), 2);
        assert_eq!(kvcache_size_bytes(0, 1, 1, 1, 1), Err(PerfError::ZeroDimension));
        assert_eq!(kvcache_size_bytes(u64::MAX, 2, 1, 1, 1), Err(PerfError::Overflow));
    }

    #[test]
    fn table_rejects_decreasing_latency() {
        assert_eq!(
            LatencyTable::new(vec![(1, 0.5), (2, 0.4)]),
            Err(PerfError::NonMonotoneTable)
        );
        assert_eq!(LatencyTable::new(vec![]), Err(PerfError::EmptyTable));
    }
}
