//! The central training loop: sample → local train → clip → aggregate →
//! server step, with periodic evaluation and divergence surfacing.

use super::{
    aggregate, clip_update, local_train, sample_cohort, server_step, ClientUpdate, DeviceShard,
    FedError, MetricsRow, Result, ServerOptimizer, ServerOptimizerKind, ServerState, TaskFilter,
    TrainingConfig,
};
use crate::dp::{compose, rdp_curve, to_epsilon, MechanismSpec, PrivacyBudget, RdpCurve};
use crate::model::{offline_accuracy, online_metrics, AppSelectionParams, Thresholds};
use crate::nn::{AdamWState, SgdState};
use crate::synth::TrainingRecord;
use rayon::prelude::*;
use std::collections::HashMap;
use std::time::Instant;

/// How a run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Completed,
    /// Aborted at this iteration with the history up to the previous one.
    Diverged { iteration: u64 },
}

/// Outcome of a training run: per-evaluation metrics plus the final state.
#[derive(Debug)]
pub struct TrainingRun {
    pub history: Vec<MetricsRow>,
    pub state: ServerState,
    pub termination: Termination,
}

impl TrainingRun {
    pub fn diverged(&self) -> bool {
        matches!(self.termination, Termination::Diverged { .. })
    }

    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.history.last()
    }
}

/// Evaluation inputs for the loop.
pub struct RunOptions<'a> {
    pub validation: &'a [TrainingRecord],
    pub thresholds: Thresholds,
}

fn epsilon_spent(curve: Option<&RdpCurve>, mechanism: &MechanismSpec, delta: f64) -> f64 {
    match curve {
        Some(c) if mechanism.sigma > 0.0 => to_epsilon(&compose(c, mechanism.iterations), delta).0,
        _ => f64::INFINITY,
    }
}

/// Start a run from freshly initialized server state.
///
/// Calibrates the noise multiplier from (ε, δ, q, T) unless the config
/// overrides it, applies the freeze policy, and executes
/// `central_iterations` rounds. A cohort underflow is an error; divergence
/// aborts with partial history.
pub fn run_training(
    config: &TrainingConfig,
    shards: &[DeviceShard],
    filter: &TaskFilter,
    options: &RunOptions,
    initial: AppSelectionParams,
) -> Result<TrainingRun> {
    config.validate()?;
    let mut model = initial;
    model.apply_freeze_policy(config.freeze_policy);

    let eligible = shards.iter().filter(|s| s.is_eligible(filter)).count();
    if config.devices_per_iteration > eligible {
        return Err(FedError::CohortUnderflow {
            requested: config.devices_per_iteration,
            eligible,
        });
    }
    let q = config.devices_per_iteration as f64 / eligible as f64;
    let sigma = match config.noise_multiplier_override {
        Some(s) => s,
        None => {
            let budget = PrivacyBudget::new(config.epsilon, config.delta_dp)?;
            crate::dp::calibrate_sigma(&budget, q, config.central_iterations)?.sigma
        }
    };
    let optimizer = match config.server_optimizer {
        ServerOptimizerKind::AdamW => ServerOptimizer::AdamW(AdamWState::new(
            config.central_learning_rate,
            AdamWState::DEFAULT_BETA1,
            AdamWState::DEFAULT_BETA2,
            AdamWState::DEFAULT_EPSILON,
            config.server_weight_decay,
            model.params(),
        )?),
        ServerOptimizerKind::Sgd => {
            ServerOptimizer::Sgd(SgdState::new(config.central_learning_rate)?)
        }
    };
    let state = ServerState {
        model,
        optimizer,
        iteration: 0,
        mechanism: MechanismSpec {
            sigma,
            q,
            iterations: 0,
        },
        master_seed: config.master_seed,
    };
    run_training_from(config, shards, filter, options, state)
}

/// Continue a run from existing server state (fresh or loaded from a
/// checkpoint) up to `config.central_iterations`. The per-iteration RNG
/// streams depend only on (master_seed, iteration), so resuming at an
/// iteration boundary reproduces the uninterrupted trajectory.
pub fn run_training_from(
    config: &TrainingConfig,
    shards: &[DeviceShard],
    filter: &TaskFilter,
    options: &RunOptions,
    mut state: ServerState,
) -> Result<TrainingRun> {
    config.validate()?;
    let start = Instant::now();
    let by_id: HashMap<u64, &DeviceShard> = shards.iter().map(|s| (s.device_id, s)).collect();
    let curve = if state.mechanism.sigma > 0.0 {
        Some(rdp_curve(state.mechanism.q, state.mechanism.sigma)?)
    } else {
        None
    };

    let mut history = Vec::new();
    let evaluate = |state: &ServerState, train_loss: f64, start: &Instant| -> Result<MetricsRow> {
        let examples = options.validation.iter().map(|r| &r.example);
        let val_accuracy = offline_accuracy(&state.model, examples.clone())?;
        let online = online_metrics(&state.model, &options.thresholds, examples)?;
        Ok(MetricsRow {
            iteration: state.iteration,
            train_loss,
            val_accuracy,
            cder: online.cder,
            disambiguation_rate: online.disambiguation_rate,
            epsilon_spent: epsilon_spent(curve.as_ref(), &state.mechanism, config.delta_dp),
            wall_ms: start.elapsed().as_millis() as u64,
        })
    };

    while state.iteration < config.central_iterations {
        let iteration = state.iteration + 1;
        let cohort = sample_cohort(
            shards,
            filter,
            config.devices_per_iteration,
            iteration,
            state.master_seed,
        )?;
        let results: Vec<Result<ClientUpdate>> = cohort
            .par_iter()
            .map(|id| {
                let shard = by_id.get(id).expect("cohort ids come from shards");
                local_train(
                    &state.model,
                    shard,
                    config.local_learning_rate,
                    config.local_epochs,
                )
                .and_then(|u| clip_update(u, config.clipping_bound))
            })
            .collect();
        let mut updates = Vec::with_capacity(results.len());
        let mut diverged = false;
        for r in results {
            match r {
                Ok(u) => updates.push(u),
                Err(FedError::Divergence { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if !diverged {
            let pseudo = aggregate(
                &updates,
                config.clipping_bound,
                state.mechanism.sigma,
                config.devices_per_iteration,
                iteration,
                state.master_seed,
            )?;
            match server_step(&mut state, &pseudo) {
                Ok(()) => {}
                Err(FedError::Divergence { .. }) => diverged = true,
                Err(e) => return Err(e),
            }
        }
        if diverged {
            return Ok(TrainingRun {
                history,
                state,
                termination: Termination::Diverged { iteration },
            });
        }
        let train_loss =
            updates.iter().map(|u| u.local_loss).sum::<f64>() / updates.len() as f64;
        if state.iteration % config.eval_every == 0 || state.iteration == config.central_iterations
        {
            history.push(evaluate(&state, train_loss, &start)?);
        }
    }
    Ok(TrainingRun {
        history,
        state,
        termination: Termination::Completed,
    })
}
