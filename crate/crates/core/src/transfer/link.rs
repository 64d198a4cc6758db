//! Analytic transfer latency over a shared device link.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TransferError;
use crate::sim::DelayDist;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    /// Bytes per second for a single uncontended transfer.
    pub bandwidth: f64,
    /// Seconds of control cost per transfer message.
    pub control_overhead: f64,
    pub hop_conflict_prob: f64,
    pub conflict_penalty: DelayDist,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            bandwidth: 25e9,
            control_overhead: 4.5e-6,
            hop_conflict_prob: 0.0,
            conflict_penalty: DelayDist::Uniform { min: 0.1, max: 0.3 },
        }
    }
}

impl LinkModel {
    pub fn new(
        bandwidth: f64,
        control_overhead: f64,
        hop_conflict_prob: f64,
        conflict_penalty: DelayDist,
    ) -> Result<Self, TransferError> {
        let link = Self {
            bandwidth,
            control_overhead,
            hop_conflict_prob,
            conflict_penalty,
        };
        link.validate()?;
        Ok(link)
    }

    pub fn validate(&self) -> Result<(), TransferError> {
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(TransferError::InvalidLink("bandwidth must be positive"));
        }
        if !(self.control_overhead.is_finite() && self.control_overhead >= 0.0) {
            return Err(TransferError::InvalidLink("control overhead must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.hop_conflict_prob) {
            return Err(TransferError::InvalidLink("conflict probability must be in [0, 1]"));
        }
        if self.conflict_penalty.is_valid() {
            Ok(())
        } else {
            Err(TransferError::InvalidLink("conflict penalty"))
        }
    }

    pub fn without_conflicts(mut self) -> Self {
        self.hop_conflict_prob = 0.0;
        self
    }

    /// Pure wire time at a fair share of the bandwidth.
    pub fn wire_time(&self, size: u64, concurrent: u32) -> f64 {
        size as f64 * f64::from(concurrent.max(1)) / self.bandwidth
    }

    /// Transfer time without any conflict penalty.
    pub fn base_time(&self, size: u64, mode: TransferMode, concurrent: u32) -> Result<f64, TransferError> {
        if size == 0 {
            return Err(TransferError::ZeroSize);
        }
        if concurrent == 0 {
            return Err(TransferError::ZeroConcurrency);
        }
        let messages = mode.messages(size)?;
        Ok(messages as f64 * self.control_overhead + self.wire_time(size, concurrent))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TransferMode {
    /// One message per fixed-size HBM block.
    BlockFixed { block_size: u64 },
    /// One meta exchange for the whole contiguous buffer.
    BlockFree,
}

impl TransferMode {
    pub fn messages(&self, size: u64) -> Result<u64, TransferError> {
        match *self {
            TransferMode::BlockFixed { block_size: 0 } => Err(TransferError::ZeroBlockSize),
            TransferMode::BlockFixed { block_size } => Ok(size.div_ceil(block_size)),
            TransferMode::BlockFree => Ok(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransferSample {
    pub time: f64,
    pub penalty: f64,
    pub conflicted: bool,
}

/// Time of one sub-transfer, drawing at most one conflict.
pub fn transfer_time<R: Rng + ?Sized>(
    size: u64,
    mode: TransferMode,
    link: &LinkModel,
    concurrent: u32,
    rng: &mut R,
) -> Result<TransferSample, TransferError> {
    let base = link.base_time(size, mode, concurrent)?;
    // No draw at all when conflicts are off, so enabling them elsewhere does
    // not shift this stream.
    let conflicted = link.hop_conflict_prob > 0.0 && rng.random_bool(link.hop_conflict_prob);
    let penalty = if conflicted {
        link.conflict_penalty.sample(rng)
    } else {
        0.0
    };
    Ok(TransferSample {
        time: base + penalty,
        penalty,
        conflicted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XiSample {
    pub xi: f64,
    pub subs: Vec<TransferSample>,
}

impl XiSample {
    pub fn conflicts(&self) -> usize {
        self.subs.iter().filter(|s| s.conflicted).count()
    }
}

/// Splits `size` evenly over `parallel` device pairs and returns the slowest
/// sub-transfer as the request's transfer time.
pub fn request_xi<R: Rng + ?Sized>(
    size: u64,
    parallel: u32,
    mode: TransferMode,
    link: &LinkModel,
    concurrent: u32,
    rng: &mut R,
) -> Result<XiSample, TransferError> {
    if parallel == 0 {
        return Err(TransferError::ZeroConcurrency);
    }
    let share = size.div_ceil(u64::from(parallel));
    let subs = (0..parallel)
        .map(|_| transfer_time(share, mode, link, concurrent, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let xi = subs.iter().map(|s| s.time).fold(f64::NEG_INFINITY, f64::max);
    Ok(XiSample { xi, subs })
}

/// Fraction of the elapsed time the link spent moving payload.
pub fn utilization(size: u64, elapsed: f64, link: &LinkModel) -> Result<f64, TransferError> {
    if !(elapsed.is_finite() && elapsed > 0.0) {
        return Err(TransferError::InvalidElapsed);
    }
    Ok((size as f64 / link.bandwidth / elapsed).clamp(0.0, 1.0))
}

/// Completion times when layer `i` may start sending at `ready[i]` and takes
/// `durations[i]` on a link that carries one layer at a time.
pub fn layered_completion(ready: &[f64], durations: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ready.len().min(durations.len()));
    let mut last = f64::NEG_INFINITY;
    for (&r, &d) in ready.iter().zip(durations) {
        last = r.max(last) + d;
        out.push(last);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quiet(bw: f64, c: f64) -> LinkModel {
        LinkModel::new(bw, c, 0.0, DelayDist::Constant { value: 0.0 }).unwrap()
    }

    #[test]
    fn pure_wire_time() {
        let link = quiet(1e9, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = transfer_time(5_000_000, TransferMode::BlockFree, &link, 1, &mut rng).unwrap();
        assert!((t.time - 0.005).abs() < 1e-15);
    }

    #[test]
    fn fixed_vs_free_example() {
        let mb = 1_000_000u64;
        let link = quiet(40e9, 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fixed = transfer_time(64 * mb, TransferMode::BlockFixed { block_size: mb }, &link, 1, &mut rng).unwrap();
        let free = transfer_time(64 * mb, TransferMode::BlockFree, &link, 1, &mut rng).unwrap();
        assert!((fixed.time - 0.008).abs() < 1e-12);
        assert!((free.time - 0.0017).abs() < 1e-12);
        assert!((utilization(64 * mb, fixed.time, &link).unwrap() - 0.2).abs() < 1e-9);
        assert!((utilization(64 * mb, free.time, &link).unwrap() - 0.0016 / 0.0017).abs() < 1e-9);
    }

    #[test]
    fn utilization_bounds() {
        let link = quiet(1e9, 0.0);
        assert_eq!(utilization(1_000, 1e-6, &link).unwrap(), 1.0);
        assert_eq!(utilization(1_000, 1e-9, &link).unwrap(), 1.0);
        assert!(utilization(1_000, 1e-3, &link).unwrap() < 1.0);
        assert_eq!(utilization(1_000, 0.0, &link), Err(TransferError::InvalidElapsed));
    }

    #[test]
    fn fair_share_slows_each_transfer() {
        let link = quiet(1e9, 0.0);
        assert!((link.base_time(1_000, TransferMode::BlockFree, 4).unwrap() - 4e-6).abs() < 1e-18);
        assert_eq!(link.base_time(1, TransferMode::BlockFree, 0), Err(TransferError::ZeroConcurrency));
        assert_eq!(link.base_time(0, TransferMode::BlockFree, 1), Err(TransferError::ZeroSize));
    }

    #[test]
    fn default_link_reduction_near_46_percent() {
        let link = LinkModel::default();
        let size = 512 * 4_718_592u64 / 8;
        let fixed = link.base_time(size, TransferMode::BlockFixed { block_size: 128 * 1024 }, 1).unwrap();
        let free = link.base_time(size, TransferMode::BlockFree, 1).unwrap();
        let reduction = 1.0 - free / fixed;
        assert!((0.44..0.48).contains(&reduction), "{reduction}");
    }

    #[test]
    fn conflicts_add_penalty() {
        let link = LinkModel::new(1e9, 0.0, 1.0, DelayDist::Constant { value: 0.2 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = transfer_time(1_000, TransferMode::BlockFree, &link, 1, &mut rng).unwrap();
        assert!(t.conflicted);
        assert!((t.time - 0.200001).abs() < 1e-12);
        let u_hit = utilization(1_000, t.time, &link).unwrap();
        let u_clean = utilization(1_000, 1e-6, &link).unwrap();
        assert!(u_hit < u_clean);
    }

    #[test]
    fn xi_is_slowest_sub_transfer() {
        let link = LinkModel::new(1e9, 1e-6, 0.5, DelayDist::Uniform { min: 0.01, max: 0.5 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = request_xi(8_000_000, 8, TransferMode::BlockFree, &link, 1, &mut rng).unwrap();
        assert_eq!(x.subs.len(), 8);
        let brute = x.subs.iter().map(|s| s.time).reduce(f64::max).unwrap();
        assert_eq!(x.xi, brute);
    }

    #[test]
    fn invalid_links_rejected() {
        let p = DelayDist::Constant { value: 0.0 };
        assert!(LinkModel::new(0.0, 0.0, 0.0, p).is_err());
        assert!(LinkModel::new(1.0, -1.0, 0.0, p).is_err());
        assert!(LinkModel::new(1.0, 0.0, 1.5, p).is_err());
        assert!(LinkModel::new(1.0, 0.0, 0.5, DelayDist::Uniform { min: 2.0, max: 1.0 }).is_err());
    }

    #[test]
    fn layered_plan_overlaps_compute() {
        // Layers ready every 1.0 s, each takes 0.5 s to send.
        let done = layered_completion(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]);
        assert_eq!(done, vec![1.5, 2.5, 3.5]);
        // Link slower than compute: sends queue up.
        let done = layered_completion(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]);
        assert_eq!(done, vec![3.0, 5.0, 7.0]);
    }
}
