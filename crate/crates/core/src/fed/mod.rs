//! The federated training loop: population partitioning, cohort sampling,
//! local SGD under a freeze mask, delta clipping, central Gaussian DP
//! aggregation, server optimizer steps, checkpointing, and metrics streams.

mod checkpoint;
mod metrics;
mod run;

pub use checkpoint::{
    load_model_checkpoint, load_server_state, save_model_checkpoint, save_server_state,
    CheckpointError,
};
pub use metrics::{
    metrics_to_csv, parse_metrics_csv, strip_wall_ms, write_metrics_csv, MetricsRow,
    METRICS_HEADER,
};
pub use run::{run_training, run_training_from, RunOptions, Termination, TrainingRun};

use crate::dp::{DpError, MechanismSpec};
use crate::model::{
    stage_network, staged_default_training_loss, AppSelectionParams, FreezePolicy, ModelError,
};
use crate::nn::{adamw_step, sgd_step, AdamWState, NnError, SgdState, Tape, Tensor};
use crate::seed::derive_rng;
use crate::synth::TrainingRecord;
use rand::distributions::Distribution;
use rand::Rng;
use rand_distr::{Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("cohort of {requested} requested but only {eligible} devices are eligible")]
    CohortUnderflow { requested: usize, eligible: usize },
    #[error("training diverged at iteration {iteration} (device {device:?}): non-finite loss")]
    Divergence { iteration: u64, device: Option<u64> },
    #[error("shard {device_id} is ineligible for local training")]
    IneligibleShard { device_id: u64 },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, FedError>;

/// Device metadata the task filter matches against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceMetadata {
    pub os_version: String,
    pub asset_version: String,
}

impl Default for DeviceMetadata {
    fn default() -> Self {
        Self {
            os_version: "os-2".to_string(),
            asset_version: "asset-1".to_string(),
        }
    }
}

/// One simulated device: its records plus filterable metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceShard {
    pub device_id: u64,
    pub records: Vec<TrainingRecord>,
    pub metadata: DeviceMetadata,
}

impl DeviceShard {
    /// Eligible iff it holds at least one record and matches the filter.
    pub fn is_eligible(&self, filter: &TaskFilter) -> bool {
        !self.records.is_empty() && filter.matches(&self.metadata)
    }
}

/// Metadata predicate for task targeting. `None` fields match anything.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskFilter {
    pub os_version: Option<String>,
    pub asset_version: Option<String>,
}

impl TaskFilter {
    pub fn match_all() -> Self {
        Self::default()
    }

    pub fn matches(&self, meta: &DeviceMetadata) -> bool {
        self.os_version.as_ref().is_none_or(|v| v == &meta.os_version)
            && self
                .asset_version
                .as_ref()
                .is_none_or(|v| v == &meta.asset_version)
    }
}

/// One device's clipped parameter delta plus local metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub device_id: u64,
    /// Flat delta over unfrozen tensors, in parameter name order.
    pub delta: Vec<f64>,
    pub local_loss: f64,
    pub sample_count: usize,
}

/// How records are packed onto devices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Fixed shard size of round(mean): with mean 1, one record per device.
    #[default]
    Exact,
    /// Shard sizes drawn from Poisson(mean); empty shards retained as
    /// ineligible devices.
    Poisson,
}

/// Assign records to devices with the requested mean shard size.
pub fn partition_population(
    records: Vec<TrainingRecord>,
    mean_points_per_user: f64,
    mode: PartitionMode,
    seed: u64,
) -> Result<Vec<DeviceShard>> {
    if !(mean_points_per_user > 0.0) || !mean_points_per_user.is_finite() {
        return Err(FedError::InvalidConfig(format!(
            "mean_points_per_user must be positive, got {mean_points_per_user}"
        )));
    }
    if records.is_empty() {
        return Err(FedError::InvalidConfig("cannot partition an empty dataset".into()));
    }
    let mut shards = Vec::new();
    let mut next = records.into_iter().peekable();
    let mut device_id = 0u64;
    let mut rng = derive_rng(seed, "partition", 0);
    let poisson = Poisson::new(mean_points_per_user)
        .map_err(|e| FedError::InvalidConfig(format!("poisson: {e}")))?;
    let exact_size = mean_points_per_user.round().max(1.0) as usize;
    while next.peek().is_some() {
        let take = match mode {
            PartitionMode::Exact => exact_size,
            PartitionMode::Poisson => poisson.sample(&mut rng) as usize,
        };
        let shard_records: Vec<TrainingRecord> = next.by_ref().take(take).collect();
        let metadata = shard_records
            .first()
            .map(|r| DeviceMetadata {
                os_version: r.meta.os_version.clone(),
                asset_version: r.meta.asset_version.clone(),
            })
            .unwrap_or_default();
        shards.push(DeviceShard {
            device_id,
            records: shard_records,
            metadata,
        });
        device_id += 1;
    }
    Ok(shards)
}

/// Uniform cohort sample without replacement among eligible devices; the RNG
/// stream is keyed by (master_seed, "cohort", iteration). Returns ascending
/// device ids.
pub fn sample_cohort(
    shards: &[DeviceShard],
    filter: &TaskFilter,
    size: usize,
    iteration: u64,
    master_seed: u64,
) -> Result<Vec<u64>> {
    let mut eligible: Vec<u64> = shards
        .iter()
        .filter(|s| s.is_eligible(filter))
        .map(|s| s.device_id)
        .collect();
    eligible.sort_unstable();
    if size > eligible.len() {
        return Err(FedError::CohortUnderflow {
            requested: size,
            eligible: eligible.len(),
        });
    }
    let mut rng = derive_rng(master_seed, "cohort", iteration);
    for i in 0..size {
        let j = i + rng.gen_range(0..eligible.len() - i);
        eligible.swap(i, j);
    }
    let mut chosen = eligible[..size].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Full-batch local SGD on one device.
///
/// Runs `local_epochs` passes over the shard (batch = the whole shard) at
/// learning rate `llr`, honoring the freeze mask on `global`; the returned
/// delta covers unfrozen tensors only. The reported loss is the global
/// model's training loss on the shard before any local step.
pub fn local_train(
    global: &AppSelectionParams,
    shard: &DeviceShard,
    llr: f64,
    local_epochs: u32,
) -> Result<ClientUpdate> {
    if shard.records.is_empty() {
        return Err(FedError::IneligibleShard {
            device_id: shard.device_id,
        });
    }
    if llr < 0.0 || !llr.is_finite() {
        return Err(FedError::InvalidConfig(format!(
            "local learning rate must be nonnegative, got {llr}"
        )));
    }
    let batch: Vec<&crate::model::LabeledExample> =
        shard.records.iter().map(|r| &r.example).collect();
    let mut local = global.clone();
    let mut first_loss = f64::NAN;
    let sgd = if llr > 0.0 { Some(SgdState::new(llr)?) } else { None };
    // exploding activations surface as divergence, not a generic numeric error
    let diverged = |e: FedError| match e {
        FedError::Nn(NnError::NonFinite { .. })
        | FedError::Model(ModelError::Nn(NnError::NonFinite { .. })) => FedError::Divergence {
            iteration: 0,
            device: Some(shard.device_id),
        },
        other => other,
    };
    for epoch in 0..local_epochs.max(1) {
        let mut tape = Tape::with_capacity(batch.len() * 32);
        let net = stage_network(&mut tape, &local);
        let loss = staged_default_training_loss(&mut tape, &net, &batch)
            .map_err(|e| diverged(e.into()))?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(FedError::Divergence {
                iteration: 0,
                device: Some(shard.device_id),
            });
        }
        if epoch == 0 {
            first_loss = loss_value;
        }
        if epoch >= local_epochs {
            break;
        }
        if let Some(sgd) = &sgd {
            let all_grads = tape.backward(loss).map_err(|e| diverged(e.into()))?;
            let grads: Vec<Tensor> = net
                .leaves
                .iter()
                .map(|id| all_grads[id.index()].clone())
                .collect();
            sgd_step(local.params_mut(), &grads, sgd).map_err(|e| diverged(e.into()))?;
        }
    }
    let before = global.params().flatten_unfrozen();
    let after = local.params().flatten_unfrozen();
    let delta: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
    Ok(ClientUpdate {
        device_id: shard.device_id,
        delta,
        local_loss: first_loss,
        sample_count: shard.records.len(),
    })
}

/// Scale the delta to L2 norm at most `c`: delta ← delta · min(1, C/‖delta‖).
/// An infinite bound disables clipping.
pub fn clip_update(mut update: ClientUpdate, c: f64) -> Result<ClientUpdate> {
    if !(c > 0.0) {
        return Err(FedError::InvalidConfig(format!(
            "clipping bound must be positive, got {c}"
        )));
    }
    if !update.delta.iter().all(|v| v.is_finite()) {
        return Err(FedError::NonFinite("client delta"));
    }
    if c.is_infinite() {
        return Ok(update);
    }
    let norm = l2_norm(&update.delta);
    if norm > c {
        let factor = c / norm;
        for v in &mut update.delta {
            *v *= factor;
        }
    }
    Ok(update)
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central DP aggregation: the pseudo-gradient is the negated noisy mean of
/// the clipped deltas,
///   g = −( Σ delta_i + N(0, (σC)² I) ) / n,
/// summed in ascending device-id order with the noise stream keyed by
/// (master_seed, "dp-noise", iteration).
pub fn aggregate(
    updates: &[ClientUpdate],
    c: f64,
    sigma: f64,
    cohort_size: usize,
    iteration: u64,
    master_seed: u64,
) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(FedError::InvalidConfig("aggregate requires at least one update".into()));
    }
    if updates.len() != cohort_size {
        return Err(FedError::InvalidConfig(format!(
            "expected {cohort_size} updates, got {}",
            updates.len()
        )));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(FedError::InvalidConfig(format!("sigma must be nonnegative, got {sigma}")));
    }
    if sigma > 0.0 && !c.is_finite() {
        return Err(FedError::InvalidConfig(
            "DP noise requires a finite clipping bound".into(),
        ));
    }
    let dim = updates[0].delta.len();
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].device_id);

    let mut sum = vec![0.0; dim];
    for &i in &order {
        let u = &updates[i];
        if u.delta.len() != dim {
            return Err(FedError::InvalidConfig(format!(
                "update from device {} has {} coordinates, expected {dim}",
                u.device_id,
                u.delta.len()
            )));
        }
        debug_assert!(
            c.is_infinite() || l2_norm(&u.delta) <= c + 1e-12,
            "unclipped update reached aggregation"
        );
        for (s, d) in sum.iter_mut().zip(&u.delta) {
            *s += d;
        }
    }
    if sigma > 0.0 {
        let mut rng = derive_rng(master_seed, "dp-noise", iteration);
        let normal = Normal::new(0.0, sigma * c).expect("valid noise scale");
        for s in &mut sum {
            *s += normal.sample(&mut rng);
        }
    }
    let n = cohort_size as f64;
    for s in &mut sum {
        *s = -*s / n;
    }
    Ok(sum)
}

/// Server-side optimizer: adaptive (AdamW) by default, plain SGD for the
/// centralized-equivalence configuration.
#[derive(Clone, Debug)]
pub enum ServerOptimizer {
    AdamW(AdamWState),
    Sgd(SgdState),
}

/// Which server optimizer a config requests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerOptimizerKind {
    #[default]
    AdamW,
    Sgd,
}

/// Mutable server-side training state.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub model: AppSelectionParams,
    pub optimizer: ServerOptimizer,
    pub iteration: u64,
    pub mechanism: MechanismSpec,
    pub master_seed: u64,
}

/// Apply the pseudo-gradient to the unfrozen tensors and advance the
/// iteration counter and privacy ledger.
pub fn server_step(state: &mut ServerState, pseudo_gradient: &[f64]) -> Result<()> {
    if !pseudo_gradient.iter().all(|v| v.is_finite()) {
        return Err(FedError::Divergence {
            iteration: state.iteration + 1,
            device: None,
        });
    }
    let params = state.model.params_mut();
    if pseudo_gradient.len() != params.unfrozen_len() {
        return Err(FedError::InvalidConfig(format!(
            "pseudo-gradient has {} coordinates, expected {}",
            pseudo_gradient.len(),
            params.unfrozen_len()
        )));
    }
    // unflatten: zeros for frozen tensors
    let mut grads = Vec::with_capacity(params.len());
    let mut off = 0;
    for e in params.entries() {
        if e.frozen {
            grads.push(Tensor::zeros(e.tensor.shape().to_vec()));
        } else {
            let n = e.tensor.len();
            grads.push(Tensor::new(
                e.tensor.shape().to_vec(),
                pseudo_gradient[off..off + n].to_vec(),
            )?);
            off += n;
        }
    }
    match &mut state.optimizer {
        ServerOptimizer::AdamW(st) => adamw_step(params, &grads, st)?,
        ServerOptimizer::Sgd(st) => sgd_step(params, &grads, st)?,
    }
    state.iteration += 1;
    state.mechanism.iterations += 1;
    Ok(())
}

/// Federated training configuration. Defaults follow the evaluated setup:
/// ε 2.0 at δ 1e-6, clipping bound 0.1, LLR 0.01, CLR 0.0005, 3 local
/// epochs, 500 central iterations, AdamW server optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub devices_per_iteration: usize,
    pub central_iterations: u64,
    pub local_epochs: u32,
    pub local_learning_rate: f64,
    pub central_learning_rate: f64,
    /// May be infinite to disable clipping (DP off).
    pub clipping_bound: f64,
    pub epsilon: f64,
    pub delta_dp: f64,
    pub freeze_policy: FreezePolicy,
    pub master_seed: u64,
    /// Evaluate on the validation set every this many iterations.
    pub eval_every: u64,
    pub server_optimizer: ServerOptimizerKind,
    pub server_weight_decay: f64,
    /// Skip calibration and use this noise multiplier (0 disables noise).
    pub noise_multiplier_override: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            devices_per_iteration: 250,
            central_iterations: 500,
            local_epochs: 3,
            local_learning_rate: 0.01,
            central_learning_rate: 0.0005,
            clipping_bound: 0.1,
            epsilon: 2.0,
            delta_dp: 1e-6,
            freeze_policy: FreezePolicy::None,
            master_seed: 0,
            eval_every: 10,
            server_optimizer: ServerOptimizerKind::AdamW,
            server_weight_decay: 0.01,
            noise_multiplier_override: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.devices_per_iteration == 0 {
            return Err(FedError::InvalidConfig("devices_per_iteration must be >= 1".into()));
        }
        if !(self.local_learning_rate >= 0.0) || !self.local_learning_rate.is_finite() {
            return Err(FedError::InvalidConfig("local_learning_rate must be nonnegative".into()));
        }
        if !(self.central_learning_rate > 0.0) || !self.central_learning_rate.is_finite() {
            return Err(FedError::InvalidConfig("central_learning_rate must be positive".into()));
        }
        if !(self.clipping_bound > 0.0) {
            return Err(FedError::InvalidConfig("clipping_bound must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(FedError::InvalidConfig("epsilon must be positive".into()));
        }
        if !(self.delta_dp > 0.0 && self.delta_dp < 1.0) {
            return Err(FedError::InvalidConfig("delta_dp must lie in (0,1)".into()));
        }
        if self.eval_every == 0 {
            return Err(FedError::InvalidConfig("eval_every must be >= 1".into()));
        }
        if let Some(s) = self.noise_multiplier_override {
            if s < 0.0 || !s.is_finite() {
                return Err(FedError::InvalidConfig("noise override must be nonnegative".into()));
            }
        }
        if self.server_weight_decay < 0.0 {
            return Err(FedError::InvalidConfig("server_weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}
