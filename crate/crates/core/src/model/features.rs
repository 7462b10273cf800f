//! Entity-type-specific data preparation: raw per-candidate usage signals
//! into the fixed feature vector the network consumes.

use super::{CandidateFeatures, ModelError, Result, FEATURE_DIM, MAX_CANDIDATES, MIN_CANDIDATES};

/// Version of the featurization below. Bump on any change to the mapping.
pub const FEATURIZER_VERSION: u32 = 1;

/// Feature slots. Slots 4..16 are reserved synthetic signal channels and are
/// zero under version 1.
pub const FEAT_RECENCY: usize = 0;
pub const FEAT_FREQUENCY: usize = 1;
pub const FEAT_AFFINITY: usize = 2;
pub const FEAT_POPULARITY: usize = 3;

/// Raw on-device signals for one candidate app.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCandidate {
    pub app_id: String,
    /// Uses within the recent window.
    pub use_count: u32,
    /// 0 = most recently used candidate, 1 = next, ...; None = never used.
    pub recency_rank: Option<u32>,
    /// Intent-affinity signal in [0,1].
    pub intent_affinity: f64,
    /// Global popularity signal in [0,1].
    pub popularity: f64,
}

/// One raw request record prior to featurization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub candidates: Vec<RawCandidate>,
    /// Total uses in the window (the frequency denominator).
    pub window_uses: u32,
}

/// Deterministic, versioned featurization. Identical records produce
/// bit-identical features.
pub fn prepare_features(record: &RawRecord) -> Result<Vec<CandidateFeatures>> {
    let n = record.candidates.len();
    if !(MIN_CANDIDATES..=MAX_CANDIDATES).contains(&n) {
        return Err(ModelError::CandidateCountOutOfRange { got: n });
    }
    record
        .candidates
        .iter()
        .map(|c| {
            if c.app_id.is_empty() {
                return Err(ModelError::Schema { field: "app_id" });
            }
            if !unit_interval(c.intent_affinity) {
                return Err(ModelError::Schema {
                    field: "intent_affinity",
                });
            }
            if !unit_interval(c.popularity) {
                return Err(ModelError::Schema { field: "popularity" });
            }
            if c.use_count > record.window_uses {
                return Err(ModelError::Schema { field: "use_count" });
            }
            let mut features = [0.0; FEATURE_DIM];
            features[FEAT_RECENCY] = c
                .recency_rank
                .map(|r| 0.5f64.powi(r.min(60) as i32))
                .unwrap_or(0.0);
            features[FEAT_FREQUENCY] = if record.window_uses > 0 {
                f64::from(c.use_count) / f64::from(record.window_uses)
            } else {
                0.0
            };
            features[FEAT_AFFINITY] = c.intent_affinity;
            features[FEAT_POPULARITY] = c.popularity;
            Ok(CandidateFeatures {
                app_id: c.app_id.clone(),
                features,
            })
        })
        .collect()
}

fn unit_interval(v: f64) -> bool {
    v.is_finite() && (0.0..=1.0).contains(&v)
}
