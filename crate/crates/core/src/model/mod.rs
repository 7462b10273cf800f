//! The app-selection network: per-candidate featurization, cross-candidate
//! multi-head self-attention, candidate scoring, epistemic and aleatoric
//! uncertainty gating, action selection, and the offline/online metrics.

mod features;
mod metrics;
mod network;

pub use features::{
    prepare_features, RawCandidate, RawRecord, FEATURIZER_VERSION, FEAT_AFFINITY, FEAT_FREQUENCY,
    FEAT_POPULARITY, FEAT_RECENCY,
};
pub use metrics::{mse_loss, offline_accuracy, online_metrics, select_action, OnlineMetrics};
pub use network::{
    forward, stage_network, staged_default_training_loss, staged_forward, staged_training_loss,
    StagedNetwork,
};

use crate::nn::{ModelParams, NnError, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Feature vector length per candidate.
pub const FEATURE_DIM: usize = 16;
/// Attention model width.
pub const MODEL_DIM: usize = 32;
/// Attention heads.
pub const NUM_HEADS: usize = 2;
/// Per-head width.
pub const HEAD_DIM: usize = MODEL_DIM / NUM_HEADS;
/// Candidate count bounds per request.
pub const MIN_CANDIDATES: usize = 2;
pub const MAX_CANDIDATES: usize = 8;

/// Weight of the auxiliary epistemic-confidence target in the training loss.
pub const EPISTEMIC_AUX_WEIGHT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("record has {got} candidates; requests carry {MIN_CANDIDATES}..={MAX_CANDIDATES}")]
    CandidateCountOutOfRange { got: usize },
    #[error("record field {field:?} is missing or out of range")]
    Schema { field: &'static str },
    #[error("label {label} does not index one of {candidates} candidates")]
    LabelOutOfRange { label: usize, candidates: usize },
    #[error("dataset must be nonempty")]
    EmptyDataset,
    #[error("parameter set does not match the app-selection architecture: {0}")]
    BadParams(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Featurized candidate: a fixed-width vector plus the opaque app id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateFeatures {
    pub app_id: String,
    pub features: [f64; FEATURE_DIM],
}

/// One scored request: candidate features plus the index the user selected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub candidates: Vec<CandidateFeatures>,
    pub label: usize,
}

impl LabeledExample {
    pub fn validate(&self) -> Result<()> {
        let n = self.candidates.len();
        if !(MIN_CANDIDATES..=MAX_CANDIDATES).contains(&n) {
            return Err(ModelError::CandidateCountOutOfRange { got: n });
        }
        if self.label >= n {
            return Err(ModelError::LabelOutOfRange {
                label: self.label,
                candidates: n,
            });
        }
        Ok(())
    }
}

/// Model output for one request.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutput {
    /// Per-candidate scores in (0,1).
    pub scores: Vec<f64>,
    /// Pooled confidence that some candidate is suitable, in (0,1).
    pub epistemic_confidence: f64,
    /// Top-1 score minus top-2 score.
    pub aleatoric_margin: f64,
}

/// Action chosen for a request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ActionDecision {
    /// Launch the candidate at this index (the argmax of the scores).
    DirectExecute(usize),
    /// Present candidates in descending score order for the user to pick.
    Disambiguate(Vec<usize>),
    /// Scores are not trustworthy; ask the user what they meant.
    Clarify,
}

/// Gating thresholds. Zero disables a gate; one forces it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_epistemic: f64,
    pub tau_aleatoric: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau_epistemic: 0.5,
            tau_aleatoric: 0.1,
        }
    }
}

impl Thresholds {
    pub fn new(tau_epistemic: f64, tau_aleatoric: f64) -> Result<Self> {
        for (field, v) in [("tau_epistemic", tau_epistemic), ("tau_aleatoric", tau_aleatoric)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ModelError::Schema { field });
            }
        }
        Ok(Self {
            tau_epistemic,
            tau_aleatoric,
        })
    }

    /// Both gates off: every request resolves to DirectExecute.
    pub fn gates_off() -> Self {
        Self {
            tau_epistemic: 0.0,
            tau_aleatoric: 0.0,
        }
    }
}

/// Which parameter tensors local training and server steps may touch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Everything trainable.
    #[default]
    None,
    /// Only the top layer (score head + epistemic head) trains.
    TopLayerOnly,
    /// Everything but the input projection trains.
    AllButInput,
}

/// Tensor names of the top layer group.
pub const TOP_LAYER_NAMES: [&str; 2] = ["epistemic_head", "score_head"];

/// The app-selection network weights: a fixed, named tensor set inside a
/// [`ModelParams`] container.
#[derive(Clone, Debug, PartialEq)]
pub struct AppSelectionParams {
    params: ModelParams,
}

/// (name, rows, cols) for every tensor in the architecture.
fn tensor_layout() -> Vec<(String, usize, usize)> {
    let mut spec = vec![("input_proj".to_string(), FEATURE_DIM, MODEL_DIM)];
    for h in 0..NUM_HEADS {
        for kind in ["wq", "wk", "wv"] {
            spec.push((format!("attn_h{h}_{kind}"), MODEL_DIM, HEAD_DIM));
        }
    }
    spec.push(("attn_out".to_string(), MODEL_DIM, MODEL_DIM));
    spec.push(("score_head".to_string(), MODEL_DIM, 1));
    spec.push(("epistemic_head".to_string(), MODEL_DIM, 1));
    spec
}

impl AppSelectionParams {
    /// All-zero weights (every score is exactly 0.5).
    pub fn zeros() -> Self {
        let mut params = ModelParams::new();
        for (name, r, c) in tensor_layout() {
            params.insert(&name, Tensor::zeros(vec![r, c])).expect("fixed layout");
        }
        Self { params }
    }

    /// Uniform Xavier initialization from a derived seed stream.
    pub fn random_init(seed: u64) -> Self {
        use rand::Rng;
        let mut out = Self::zeros();
        for (i, (name, r, c)) in tensor_layout().into_iter().enumerate() {
            let mut rng = crate::seed::derive_rng(seed, "model-init", i as u64);
            let limit = (6.0 / (r + c) as f64).sqrt();
            let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-limit..limit)).collect();
            *out.params.get_mut(&name).expect("fixed layout") =
                Tensor::matrix(r, c, data).expect("finite init");
        }
        out
    }

    /// Wrap an existing container, validating the exact tensor set.
    pub fn from_params(params: ModelParams) -> Result<Self> {
        let layout = tensor_layout();
        if params.len() != layout.len() {
            return Err(ModelError::BadParams(format!(
                "expected {} tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, r, c) in layout {
            let t = params
                .get(&name)
                .map_err(|_| ModelError::BadParams(format!("missing tensor {name:?}")))?;
            if t.shape() != [r, c] {
                return Err(ModelError::BadParams(format!(
                    "tensor {name:?} has shape {:?}, expected [{r}, {c}]",
                    t.shape()
                )));
            }
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    /// Apply a freeze policy to the container's freeze mask.
    pub fn apply_freeze_policy(&mut self, policy: FreezePolicy) {
        self.params.clear_freeze();
        match policy {
            FreezePolicy::None => {}
            FreezePolicy::TopLayerOnly => {
                self.params
                    .set_frozen_where(|n| !TOP_LAYER_NAMES.contains(&n), true);
            }
            FreezePolicy::AllButInput => {
                self.params.set_frozen_where(|n| n == "input_proj", true);
            }
        }
    }
}

#[cfg(test)]
mod tests;
