//! Forward passes of the selection network.
//!
//! Two routes share the same op order: a plain-loop inference path used for
//! metrics, and a tape path used for training. A unit test pins them to each
//! other.

use super::{
    AppSelectionParams, CandidateFeatures, LabeledExample, ModelError, PredictionOutput, Result,
    EPISTEMIC_AUX_WEIGHT, FEATURE_DIM, HEAD_DIM, MAX_CANDIDATES, MIN_CANDIDATES, MODEL_DIM,
    NUM_HEADS,
};
use crate::nn::{NodeId, Tape, Tensor};

fn attention_scale() -> f64 {
    1.0 / (HEAD_DIM as f64).sqrt()
}

fn check_candidate_count(n: usize) -> Result<()> {
    if (MIN_CANDIDATES..=MAX_CANDIDATES).contains(&n) {
        Ok(())
    } else {
        Err(ModelError::CandidateCountOutOfRange { got: n })
    }
}

fn feature_matrix(candidates: &[CandidateFeatures]) -> Tensor {
    let n = candidates.len();
    let mut data = Vec::with_capacity(n * FEATURE_DIM);
    for c in candidates {
        data.extend_from_slice(&c.features);
    }
    Tensor::matrix(n, FEATURE_DIM, data).expect("finite features")
}

/// Margin between the best and second-best scores.
fn score_margin(scores: &[f64]) -> f64 {
    let mut top = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &s in scores {
        if s > top {
            second = top;
            top = s;
        } else if s > second {
            second = s;
        }
    }
    top - second
}

/// Inference: per-candidate scores, pooled epistemic confidence, and the
/// top-two score margin. Pure function of (params, features).
pub fn forward(
    params: &AppSelectionParams,
    candidates: &[CandidateFeatures],
) -> Result<PredictionOutput> {
    let n = candidates.len();
    check_candidate_count(n)?;
    let p = params.params();
    let x = feature_matrix(candidates);

    // input projection
    let mut xp = vec![0.0; n * MODEL_DIM];
    crate::nn::tape_mat_mul(n, FEATURE_DIM, MODEL_DIM, x.data(), p.get("input_proj")?.data(), &mut xp);

    // heads
    let scale = attention_scale();
    let mut concat = vec![0.0; n * MODEL_DIM];
    for h in 0..NUM_HEADS {
        let wq = p.get(&format!("attn_h{h}_wq"))?.data();
        let wk = p.get(&format!("attn_h{h}_wk"))?.data();
        let wv = p.get(&format!("attn_h{h}_wv"))?.data();
        let mut q = vec![0.0; n * HEAD_DIM];
        let mut k = vec![0.0; n * HEAD_DIM];
        let mut v = vec![0.0; n * HEAD_DIM];
        crate::nn::tape_mat_mul(n, MODEL_DIM, HEAD_DIM, &xp, wq, &mut q);
        crate::nn::tape_mat_mul(n, MODEL_DIM, HEAD_DIM, &xp, wk, &mut k);
        crate::nn::tape_mat_mul(n, MODEL_DIM, HEAD_DIM, &xp, wv, &mut v);

        // softmax(q·kᵀ · scale) rows
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut dot = 0.0;
                for d in 0..HEAD_DIM {
                    dot += q[i * HEAD_DIM + d] * k[j * HEAD_DIM + d];
                }
                weights[i * n + j] = dot * scale;
            }
            let row = &mut weights[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for w in row.iter_mut() {
                *w = (*w - max).exp();
                sum += *w;
            }
            for w in row.iter_mut() {
                *w /= sum;
            }
        }
        // mixed values into the head's slice of the concat buffer
        for i in 0..n {
            for d in 0..HEAD_DIM {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += weights[i * n + j] * v[j * HEAD_DIM + d];
                }
                concat[i * MODEL_DIM + h * HEAD_DIM + d] = acc;
            }
        }
    }

    // output projection + residual
    let mut attended = vec![0.0; n * MODEL_DIM];
    crate::nn::tape_mat_mul(n, MODEL_DIM, MODEL_DIM, &concat, p.get("attn_out")?.data(), &mut attended);
    for (a, &x) in attended.iter_mut().zip(&xp) {
        *a += x;
    }

    // score head
    let ws = p.get("score_head")?.data();
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut logit = 0.0;
        for d in 0..MODEL_DIM {
            logit += attended[i * MODEL_DIM + d] * ws[d];
        }
        scores.push(crate::nn::stable_sigmoid(logit));
    }

    // mean pool + epistemic head
    let we = p.get("epistemic_head")?.data();
    let mut pooled_logit = 0.0;
    for d in 0..MODEL_DIM {
        let mut acc = 0.0;
        for i in 0..n {
            acc += (1.0 / n as f64) * attended[i * MODEL_DIM + d];
        }
        pooled_logit += acc * we[d];
    }
    let epistemic_confidence = crate::nn::stable_sigmoid(pooled_logit);

    let aleatoric_margin = score_margin(&scores);
    Ok(PredictionOutput {
        scores,
        epistemic_confidence,
        aleatoric_margin,
    })
}

/// Parameter leaves staged on a tape, in the container's entry order.
pub struct StagedNetwork {
    /// Leaf node per parameter entry, aligned with `params.entries()`.
    pub leaves: Vec<NodeId>,
    input_proj: NodeId,
    heads: Vec<(NodeId, NodeId, NodeId)>,
    attn_out: NodeId,
    score_head: NodeId,
    epistemic_head: NodeId,
}

/// Register all parameter tensors as tape leaves.
pub fn stage_network(tape: &mut Tape, params: &AppSelectionParams) -> StagedNetwork {
    let p = params.params();
    let leaves: Vec<NodeId> = p.entries().iter().map(|e| tape.leaf(e.tensor.clone())).collect();
    let by_name = |name: &str| {
        let idx = p
            .entries()
            .iter()
            .position(|e| e.name == name)
            .expect("fixed layout");
        leaves[idx]
    };
    StagedNetwork {
        input_proj: by_name("input_proj"),
        heads: (0..NUM_HEADS)
            .map(|h| {
                (
                    by_name(&format!("attn_h{h}_wq")),
                    by_name(&format!("attn_h{h}_wk")),
                    by_name(&format!("attn_h{h}_wv")),
                )
            })
            .collect(),
        attn_out: by_name("attn_out"),
        score_head: by_name("score_head"),
        epistemic_head: by_name("epistemic_head"),
        leaves,
    }
}

/// Tape forward for one request: returns (scores [n×1], epistemic [1×1]).
pub fn staged_forward(
    tape: &mut Tape,
    net: &StagedNetwork,
    candidates: &[CandidateFeatures],
) -> Result<(NodeId, NodeId)> {
    let n = candidates.len();
    check_candidate_count(n)?;
    let x = tape.leaf(feature_matrix(candidates));
    let xp = tape.matmul(x, net.input_proj)?;

    let mut head_outputs = Vec::with_capacity(NUM_HEADS);
    for &(wq, wk, wv) in &net.heads {
        let q = tape.matmul(xp, wq)?;
        let k = tape.matmul(xp, wk)?;
        let v = tape.matmul(xp, wv)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, attention_scale())?;
        let weights = tape.softmax_rows(logits)?;
        head_outputs.push(tape.matmul(weights, v)?);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    let projected = tape.matmul(concat, net.attn_out)?;
    let attended = tape.add(xp, projected)?;

    let score_logits = tape.matmul(attended, net.score_head)?;
    let scores = tape.sigmoid(score_logits)?;

    let pool = tape.leaf(Tensor::matrix(1, n, vec![1.0 / n as f64; n]).expect("pool row"));
    let pooled = tape.matmul(pool, attended)?;
    let epi_logit = tape.matmul(pooled, net.epistemic_head)?;
    let epistemic = tape.sigmoid(epi_logit)?;
    Ok((scores, epistemic))
}

/// Batch training loss on the tape: mean over records of the one-hot score
/// MSE, plus `aux_weight` times the epistemic head's squared distance from
/// its always-on target.
pub fn staged_training_loss(
    tape: &mut Tape,
    net: &StagedNetwork,
    batch: &[&LabeledExample],
    aux_weight: f64,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut total: Option<NodeId> = None;
    for ex in batch {
        ex.validate()?;
        let (scores, epistemic) = staged_forward(tape, net, &ex.candidates)?;
        let n = ex.candidates.len();
        let mut one_hot = vec![0.0; n];
        one_hot[ex.label] = 1.0;
        let target = tape.leaf(Tensor::column(one_hot)?);
        let mut loss = tape.mse_loss(scores, target)?;
        if aux_weight > 0.0 {
            let aux_target = tape.leaf(Tensor::matrix(1, 1, vec![1.0])?);
            let aux = tape.mse_loss(epistemic, aux_target)?;
            let aux = tape.scale(aux, aux_weight)?;
            loss = tape.add(loss, aux)?;
        }
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    let total = total.expect("nonempty batch");
    Ok(tape.scale(total, 1.0 / batch.len() as f64)?)
}

/// Default training loss (auxiliary weight [`EPISTEMIC_AUX_WEIGHT`]).
pub fn staged_default_training_loss(
    tape: &mut Tape,
    net: &StagedNetwork,
    batch: &[&LabeledExample],
) -> Result<NodeId> {
    staged_training_loss(tape, net, batch, EPISTEMIC_AUX_WEIGHT)
}
