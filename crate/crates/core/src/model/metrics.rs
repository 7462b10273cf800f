//! Action selection and the offline/online evaluation metrics.

use super::network::{forward, stage_network, staged_training_loss};
use super::{
    ActionDecision, AppSelectionParams, LabeledExample, ModelError, PredictionOutput, Result,
    Thresholds,
};
use crate::nn::Tape;

/// Argmax with ties broken toward the lowest index.
pub(crate) fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Gate the prediction into an action:
/// low epistemic confidence → Clarify; small top-two margin → Disambiguate
/// (candidates by descending score, ties by index); otherwise DirectExecute
/// of the argmax.
pub fn select_action(output: &PredictionOutput, thresholds: &Thresholds) -> ActionDecision {
    if output.epistemic_confidence < thresholds.tau_epistemic {
        return ActionDecision::Clarify;
    }
    if output.aleatoric_margin < thresholds.tau_aleatoric {
        let mut order: Vec<usize> = (0..output.scores.len()).collect();
        order.sort_by(|&a, &b| {
            output.scores[b]
                .partial_cmp(&output.scores[a])
                .expect("finite scores")
                .then(a.cmp(&b))
        });
        return ActionDecision::Disambiguate(order);
    }
    ActionDecision::DirectExecute(argmax(&output.scores))
}

/// One-hot MSE over a batch (mean over candidates, then over records),
/// without the auxiliary epistemic term.
pub fn mse_loss<'a, I>(params: &AppSelectionParams, batch: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a LabeledExample>,
{
    let refs: Vec<&LabeledExample> = batch.into_iter().collect();
    if refs.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut tape = Tape::with_capacity(refs.len() * 32);
    let net = stage_network(&mut tape, params);
    let loss = staged_training_loss(&mut tape, &net, &refs, 0.0)?;
    Ok(tape.value(loss).item())
}

/// Fraction of records whose argmax score hits the label.
pub fn offline_accuracy<'a, I>(params: &AppSelectionParams, dataset: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a LabeledExample>,
{
    let mut total = 0usize;
    let mut correct = 0usize;
    for ex in dataset {
        ex.validate()?;
        let out = forward(params, &ex.candidates)?;
        if argmax(&out.scores) == ex.label {
            correct += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(ModelError::EmptyDataset);
    }
    Ok(correct as f64 / total as f64)
}

/// User-facing rates over all records.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OnlineMetrics {
    /// Correct direct execution rate: direct executions that hit the label,
    /// over all records.
    pub cder: f64,
    /// Disambiguation prompts over all records.
    pub disambiguation_rate: f64,
    /// Clarification prompts over all records.
    pub clarify_rate: f64,
}

/// CDER and disambiguation rate at the given thresholds.
pub fn online_metrics<'a, I>(
    params: &AppSelectionParams,
    thresholds: &Thresholds,
    dataset: I,
) -> Result<OnlineMetrics>
where
    I: IntoIterator<Item = &'a LabeledExample>,
{
    let mut total = 0usize;
    let mut correct_direct = 0usize;
    let mut disambiguations = 0usize;
    let mut clarifies = 0usize;
    for ex in dataset {
        ex.validate()?;
        let out = forward(params, &ex.candidates)?;
        match select_action(&out, thresholds) {
            ActionDecision::DirectExecute(i) => {
                if i == ex.label {
                    correct_direct += 1;
                }
            }
            ActionDecision::Disambiguate(_) => disambiguations += 1,
            ActionDecision::Clarify => clarifies += 1,
        }
        total += 1;
    }
    if total == 0 {
        return Err(ModelError::EmptyDataset);
    }
    let denom = total as f64;
    Ok(OnlineMetrics {
        cder: correct_direct as f64 / denom,
        disambiguation_rate: disambiguations as f64 / denom,
        clarify_rate: clarifies as f64 / denom,
    })
}
