//! SGD (client side) and AdamW with decoupled weight decay (server side).

use super::{ModelParams, NnError, Result, Tensor};

/// Plain SGD state.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub learning_rate: f64,
}

impl SgdState {
    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(NnError::InvalidArgument(format!(
                "sgd learning_rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self { learning_rate })
    }
}

/// AdamW state; moments are congruent to the parameters they track.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_stability: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamWState {
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;
    pub const DEFAULT_EPSILON: f64 = 1e-8;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;

    pub fn new(
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon_stability: f64,
        weight_decay: f64,
        params: &ModelParams,
    ) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(NnError::InvalidArgument(format!(
                "adamw learning_rate must be positive, got {learning_rate}"
            )));
        }
        for (name, v) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0 < v && v < 1.0) {
                return Err(NnError::InvalidArgument(format!(
                    "adamw {name} must be in (0,1), got {v}"
                )));
            }
        }
        if !(epsilon_stability > 0.0) || weight_decay < 0.0 {
            return Err(NnError::InvalidArgument(
                "adamw epsilon must be positive and weight_decay nonnegative".into(),
            ));
        }
        let zeros: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape().to_vec()))
            .collect();
        Ok(Self {
            learning_rate,
            beta1,
            beta2,
            epsilon_stability,
            weight_decay,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        })
    }

    /// Standard defaults (beta1 0.9, beta2 0.999, eps 1e-8, decay 0.01).
    pub fn with_defaults(learning_rate: f64, params: &ModelParams) -> Result<Self> {
        Self::new(
            learning_rate,
            Self::DEFAULT_BETA1,
            Self::DEFAULT_BETA2,
            Self::DEFAULT_EPSILON,
            Self::DEFAULT_WEIGHT_DECAY,
            params,
        )
    }
}

fn check_grads(params: &ModelParams, grads: &[Tensor], op: &'static str) -> Result<()> {
    if grads.len() != params.len() {
        return Err(NnError::InvalidArgument(format!(
            "{op}: {} gradient tensors for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (e, g) in params.entries().iter().zip(grads) {
        if e.frozen {
            continue;
        }
        if !e.tensor.same_shape(g) {
            return Err(NnError::ShapeMismatch {
                op,
                lhs: e.tensor.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// θ ← θ − lr·g for unfrozen tensors; frozen tensors are untouched.
///
/// `grads` is aligned with `params.entries()`; gradients for frozen entries
/// are ignored.
pub fn sgd_step(params: &mut ModelParams, grads: &[Tensor], state: &SgdState) -> Result<()> {
    check_grads(params, grads, "sgd_step")?;
    let lr = state.learning_rate;
    for (e, g) in params.entries_mut().iter_mut().zip(grads) {
        if e.frozen {
            continue;
        }
        for (v, &gv) in e.tensor.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * gv;
        }
    }
    Ok(())
}

/// Bias-corrected Adam update with decoupled weight decay:
/// θ ← θ − lr·( m̂/(√v̂ + ε) + wd·θ ). Increments `step_count` by one.
pub fn adamw_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamWState) -> Result<()> {
    check_grads(params, grads, "adamw_step")?;
    for (e, g) in params.entries().iter().zip(grads) {
        if !e.frozen && !g.data().iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFinite { op: "adamw_step" });
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    let (lr, eps, wd) = (state.learning_rate, state.epsilon_stability, state.weight_decay);

    for (i, e) in params.entries_mut().iter_mut().enumerate() {
        if e.frozen {
            continue;
        }
        let g = grads[i].data();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let theta = e.tensor.data_mut();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[j]);
        }
    }
    Ok(())
}
