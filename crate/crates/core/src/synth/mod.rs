//! Seeded synthetic populations, app-usage records, and controllable
//! temporal distribution shift.
//!
//! Every generator output is a pure function of (config, seed). Labels are
//! drawn from a user's drifted preference simplex at the record's time;
//! habit features (frequency, recency) reflect the user's base preferences,
//! while the affinity feature tracks the current drifted preference. Under
//! drift the habit channels go stale, which is exactly the signal the
//! fine-tuning experiments adapt to.

mod dataset;

pub use dataset::{
    dataset_digest, read_records, write_records, DatasetConfig, DatasetError, ExperimentDatasets,
    SCHEMA_VERSION,
};

use crate::model::{prepare_features, LabeledExample, RawCandidate, RawRecord};
use crate::seed::{derive_rng, derive_seed};
use rand::distributions::Distribution;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("time {0} outside [0,1]")]
    TimeOutOfRange(f64),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Generator knobs. Defaults give the desk-scale task: 8 apps, 4 intents,
/// skewed habits, and mildly noisy features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_apps: usize,
    pub num_intents: usize,
    /// Dirichlet concentration for preference draws; infinite = uniform.
    pub concentration: f64,
    /// Gaussian noise added to the affinity feature.
    pub feature_noise_sd: f64,
    /// Usage-history window behind the frequency feature.
    pub history_window: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 5_000,
            num_apps: 8,
            num_intents: 4,
            concentration: 0.1,
            feature_noise_sd: 0.05,
            history_window: 60,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 {
            return Err(SynthError::InvalidConfig("num_users must be >= 1".into()));
        }
        if self.num_apps < 2 || self.num_apps > crate::model::MAX_CANDIDATES {
            return Err(SynthError::InvalidConfig(format!(
                "num_apps must lie in 2..={}, got {}",
                crate::model::MAX_CANDIDATES,
                self.num_apps
            )));
        }
        if self.num_intents == 0 {
            return Err(SynthError::InvalidConfig("num_intents must be >= 1".into()));
        }
        if !(self.concentration > 0.0) {
            return Err(SynthError::InvalidConfig(
                "concentration must be positive".into(),
            ));
        }
        if self.feature_noise_sd < 0.0 || !self.feature_noise_sd.is_finite() {
            return Err(SynthError::InvalidConfig(
                "feature_noise_sd must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-user preference profile: one simplex over apps per intent.
#[derive(Clone, Debug, PartialEq)]
pub struct UserProfile {
    pub user_id: u64,
    /// `prefs[intent][app]`, each row a simplex.
    pub prefs: Vec<Vec<f64>>,
    pub engagement: f64,
}

/// Population-level drift: shared per-intent target simplices and a strength.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftSchedule {
    /// λ in [0,1]; zero means preferences are time-invariant.
    pub strength: f64,
    /// Target preference simplex per intent.
    pub targets: Vec<Vec<f64>>,
}

impl DriftSchedule {
    /// No drift; targets equal to uniform (unused at λ = 0).
    pub fn none(config: &SynthConfig) -> Self {
        Self {
            strength: 0.0,
            targets: vec![vec![1.0 / config.num_apps as f64; config.num_apps]; config.num_intents],
        }
    }

    /// Seeded drift targets drawn like user preferences.
    pub fn generate(config: &SynthConfig, strength: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(SynthError::InvalidConfig(format!(
                "drift strength must lie in [0,1], got {strength}"
            )));
        }
        let targets = (0..config.num_intents)
            .map(|i| {
                let mut rng = derive_rng(seed, "drift-target", i as u64);
                dirichlet(config.concentration, config.num_apps, &mut rng)
            })
            .collect();
        Ok(Self { strength, targets })
    }
}

/// Record metadata carried through partitioning and filtering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub os_version: String,
    pub asset_version: String,
    pub timestamp: f64,
}

/// One synthetic interaction: a labeled request plus metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    #[serde(flatten)]
    pub example: LabeledExample,
    #[serde(flatten)]
    pub meta: RecordMeta,
}

/// Dirichlet(concentration) draw via normalized Gamma variates; an infinite
/// concentration degenerates to the exact uniform simplex.
fn dirichlet(concentration: f64, k: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    if concentration.is_infinite() {
        return vec![1.0 / k as f64; k];
    }
    let gamma = Gamma::new(concentration, 1.0).expect("positive shape");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|v| v / sum).collect();
        }
    }
}

/// Deterministic population of preference profiles.
pub fn generate_population(config: &SynthConfig) -> Result<Vec<UserProfile>> {
    config.validate()?;
    Ok((0..config.num_users as u64)
        .map(|user_id| {
            let mut rng = derive_rng(config.seed, "user", user_id);
            let prefs = (0..config.num_intents)
                .map(|_| dirichlet(config.concentration, config.num_apps, &mut rng))
                .collect();
            let engagement = 0.25 + rng.gen::<f64>() * 1.5;
            UserProfile {
                user_id,
                prefs,
                engagement,
            }
        })
        .collect())
}

/// Convex blend of a base simplex toward a target: (1−λt)·base + λt·target,
/// renormalized. λ = 0 or t = 0 returns the base exactly.
pub fn drifted_simplex(base: &[f64], target: &[f64], strength: f64, t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(SynthError::TimeOutOfRange(t));
    }
    let w = strength * t;
    if w == 0.0 {
        return Ok(base.to_vec());
    }
    let mut blended: Vec<f64> = base
        .iter()
        .zip(target)
        .map(|(&b, &g)| (1.0 - w) * b + w * g)
        .collect();
    let sum: f64 = blended.iter().sum();
    for v in &mut blended {
        *v /= sum;
    }
    Ok(blended)
}

/// All intents' preference simplices of one user at time `t`.
pub fn preferences_at(
    profile: &UserProfile,
    schedule: &DriftSchedule,
    t: f64,
) -> Result<Vec<Vec<f64>>> {
    profile
        .prefs
        .iter()
        .zip(&schedule.targets)
        .map(|(base, target)| drifted_simplex(base, target, schedule.strength, t))
        .collect()
}

/// Population marginal of base preferences: `marginal[intent][app]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PopularityTable {
    pub marginal: Vec<Vec<f64>>,
}

impl PopularityTable {
    pub fn from_population(population: &[UserProfile]) -> Self {
        assert!(!population.is_empty(), "empty population");
        let intents = population[0].prefs.len();
        let apps = population[0].prefs[0].len();
        let mut marginal = vec![vec![0.0; apps]; intents];
        for user in population {
            for (i, prefs) in user.prefs.iter().enumerate() {
                for (a, &p) in prefs.iter().enumerate() {
                    marginal[i][a] += p;
                }
            }
        }
        let n = population.len() as f64;
        for row in &mut marginal {
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        Self { marginal }
    }
}

fn categorical(weights: &[f64], rng: &mut ChaCha20Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// One record at time `t` for the given user; all randomness from `rng`.
pub fn generate_record(
    profile: &UserProfile,
    schedule: &DriftSchedule,
    popularity: &PopularityTable,
    t: f64,
    config: &SynthConfig,
    rng: &mut ChaCha20Rng,
) -> Result<TrainingRecord> {
    let intent = rng.gen_range(0..config.num_intents);
    let base = &profile.prefs[intent];
    let current = drifted_simplex(base, &schedule.targets[intent], schedule.strength, t)?;

    // label follows the *current* preferences
    let label = categorical(&current, rng);

    // habit window: multinomial usage counts over the base preferences
    let mut counts = vec![0u32; config.num_apps];
    for _ in 0..config.history_window {
        counts[categorical(base, rng)] += 1;
    }
    // recency ranks: sampling without replacement by base preference
    let mut remaining: Vec<usize> = (0..config.num_apps).collect();
    let mut weights: Vec<f64> = base.clone();
    let mut ranks = vec![0u32; config.num_apps];
    let mut rank = 0u32;
    while !remaining.is_empty() {
        let pick = categorical(&weights, rng);
        ranks[remaining[pick]] = rank;
        remaining.swap_remove(pick);
        weights.swap_remove(pick);
        rank += 1;
    }

    let candidates: Vec<RawCandidate> = (0..config.num_apps)
        .map(|app| {
            let noisy_affinity = if config.feature_noise_sd > 0.0 {
                let noise: f64 =
                    rand_distr::Normal::new(0.0, config.feature_noise_sd).expect("valid sd").sample(rng);
                (current[app] + noise).clamp(0.0, 1.0)
            } else {
                current[app]
            };
            RawCandidate {
                app_id: format!("app{app}"),
                use_count: counts[app],
                recency_rank: Some(ranks[app]),
                intent_affinity: noisy_affinity,
                popularity: popularity.marginal[intent][app].clamp(0.0, 1.0),
            }
        })
        .collect();
    let raw = RawRecord {
        candidates,
        window_uses: config.history_window,
    };
    let features = prepare_features(&raw).expect("generator produces eligible records");

    // device/OS metadata: a small deterministic mix for filter queries
    let os_version = if derive_seed(config.seed, "os", profile.user_id) % 10 == 0 {
        "os-1".to_string()
    } else {
        "os-2".to_string()
    };
    Ok(TrainingRecord {
        example: LabeledExample {
            candidates: features,
            label,
        },
        meta: RecordMeta {
            os_version,
            asset_version: "asset-1".to_string(),
            timestamp: t,
        },
    })
}

/// `n` records for one user at fixed time `t`, seeded independently of other
/// calls through `(seed, "records", user_id)`.
pub fn generate_records(
    profile: &UserProfile,
    schedule: &DriftSchedule,
    popularity: &PopularityTable,
    t: f64,
    n: usize,
    config: &SynthConfig,
    seed: u64,
) -> Result<Vec<TrainingRecord>> {
    let mut rng = derive_rng(seed, "records", profile.user_id);
    (0..n)
        .map(|_| generate_record(profile, schedule, popularity, t, config, &mut rng))
        .collect()
}

/// A split of records drawn over a time range from random users.
pub fn generate_split(
    population: &[UserProfile],
    schedule: &DriftSchedule,
    popularity: &PopularityTable,
    config: &SynthConfig,
    split_name: &str,
    size: usize,
    t_range: (f64, f64),
) -> Result<Vec<TrainingRecord>> {
    let split_seed = derive_seed(config.seed, split_name, 0);
    let mut rng = derive_rng(split_seed, "split", 0);
    (0..size)
        .map(|_| {
            let user = &population[rng.gen_range(0..population.len())];
            let t = rng.gen_range(t_range.0..=t_range.1);
            generate_record(user, schedule, popularity, t, config, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests;
