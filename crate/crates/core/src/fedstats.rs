//! Federated statistics: DP histogram queries over simulated devices and the
//! eligible-device count that gates a training launch.
//!
//! Each device contributes a one-hot (or all-zero) indicator over a fixed
//! bucket set, so per-device L2 sensitivity is exactly 1; the trusted
//! aggregator sums contributions and adds per-bucket Gaussian noise.

use crate::fed::{DeviceShard, TaskFilter};
use crate::seed::derive_rng;
use rand::distributions::Distribution;
use rand_distr::Normal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FedStatsError {
    #[error("histogram aggregation requires at least one contribution")]
    EmptyContributions,
    #[error("contribution length {got} does not match {expected} buckets")]
    BucketMismatch { got: usize, expected: usize },
    #[error("invalid noise scale {0}")]
    InvalidNoise(f64),
}

pub type Result<T> = std::result::Result<T, FedStatsError>;

/// What a histogram query buckets devices by.
#[derive(Clone, Debug, PartialEq)]
pub enum BucketKey {
    /// Modal ground-truth label across the device's matching records; ties
    /// break to the lexicographically smallest app id.
    LabelApp(Vec<String>),
    /// Matching-record count: {0, 1, 2–5, 6+}.
    RecordCount,
    /// Device OS version, over a fixed list.
    OsVersion(Vec<String>),
}

impl BucketKey {
    pub fn bucket_labels(&self) -> Vec<String> {
        match self {
            BucketKey::LabelApp(apps) => apps.clone(),
            BucketKey::RecordCount => ["0", "1", "2-5", "6+"].map(String::from).to_vec(),
            BucketKey::OsVersion(versions) => versions.clone(),
        }
    }
}

/// A histogram query: bucketing, a device-metadata filter, and noise scale.
#[derive(Clone, Debug)]
pub struct HistogramQuery {
    pub key: BucketKey,
    pub filter: TaskFilter,
    pub noise_scale: f64,
}

/// Summed indicator counts plus Gaussian noise. Counts may be negative;
/// do not clamp before significance testing.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyHistogram {
    pub labels: Vec<String>,
    pub counts: Vec<f64>,
}

/// One-hot indicator over the query's buckets, or all-zero when the device
/// fails the metadata filter (or has nothing to report).
pub fn device_contribution(shard: &DeviceShard, query: &HistogramQuery) -> Vec<f64> {
    let labels = query.key.bucket_labels();
    let mut out = vec![0.0; labels.len()];
    if !query.filter.matches(&shard.metadata) {
        return out;
    }
    let hot = match &query.key {
        BucketKey::RecordCount => {
            let n = shard.records.len();
            Some(match n {
                0 => 0,
                1 => 1,
                2..=5 => 2,
                _ => 3,
            })
        }
        BucketKey::OsVersion(versions) => {
            versions.iter().position(|v| v == &shard.metadata.os_version)
        }
        BucketKey::LabelApp(apps) => {
            let mut counts = vec![0usize; apps.len()];
            for r in &shard.records {
                let id = &r.example.candidates[r.example.label].app_id;
                if let Some(i) = apps.iter().position(|a| a == id) {
                    counts[i] += 1;
                }
            }
            // modal label; ties to the lexicographically smallest id, which
            // is the earliest index when `apps` is sorted
            let max = counts.iter().copied().max().unwrap_or(0);
            if max == 0 {
                None
            } else {
                counts.iter().position(|&c| c == max)
            }
        }
    };
    if let Some(i) = hot {
        out[i] = 1.0;
    }
    out
}

/// Elementwise sum of contributions plus per-bucket Gaussian noise of
/// standard deviation `noise_scale`.
pub fn aggregate_histogram(
    labels: Vec<String>,
    contributions: &[Vec<f64>],
    noise_scale: f64,
    seed: u64,
) -> Result<NoisyHistogram> {
    if contributions.is_empty() {
        return Err(FedStatsError::EmptyContributions);
    }
    if !(noise_scale >= 0.0) || !noise_scale.is_finite() {
        return Err(FedStatsError::InvalidNoise(noise_scale));
    }
    let width = labels.len();
    let mut counts = vec![0.0; width];
    for c in contributions {
        if c.len() != width {
            return Err(FedStatsError::BucketMismatch {
                got: c.len(),
                expected: width,
            });
        }
        for (acc, v) in counts.iter_mut().zip(c) {
            *acc += v;
        }
    }
    if noise_scale > 0.0 {
        let mut rng = derive_rng(seed, "fedstats-noise", 0);
        let normal = Normal::new(0.0, noise_scale).expect("valid scale");
        for c in &mut counts {
            *c += normal.sample(&mut rng);
        }
    }
    Ok(NoisyHistogram { labels, counts })
}

/// Launch-gate outcome from the eligible-device count query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeasibilityReport {
    pub noisy_count: f64,
    /// Devices per iteration times the safety factor.
    pub required: f64,
    pub feasible: bool,
}

/// Default launch-gate safety factor over the cohort size.
pub const DEFAULT_SAFETY_FACTOR: f64 = 1.2;

/// Noisy count of devices holding at least one record and passing the
/// filter; feasible iff the count clears `devices_per_iteration × safety`.
pub fn count_eligible_devices(
    population: &[DeviceShard],
    filter: &TaskFilter,
    noise_scale: f64,
    seed: u64,
    devices_per_iteration: usize,
    safety_factor: f64,
) -> Result<FeasibilityReport> {
    if !(noise_scale >= 0.0) || !noise_scale.is_finite() {
        return Err(FedStatsError::InvalidNoise(noise_scale));
    }
    let mut count = population.iter().filter(|s| s.is_eligible(filter)).count() as f64;
    if noise_scale > 0.0 {
        let mut rng = derive_rng(seed, "fedstats-eligible", 0);
        count += Normal::new(0.0, noise_scale).expect("valid scale").sample(&mut rng);
    }
    let required = devices_per_iteration as f64 * safety_factor;
    Ok(FeasibilityReport {
        noisy_count: count,
        required,
        feasible: count >= required,
    })
}
