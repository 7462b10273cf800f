//! Central finite-difference verification of reverse-mode gradients.
//!
//! Builds randomly shaped networks from the full op set, evaluates the loss
//! with perturbed parameters (forward passes only), and compares the
//! difference quotients against [`Tape::backward`]. The difference quotient
//! never touches the backward path, so it is an independent check of it.

use super::{NodeId, Tape, Tensor};
use crate::seed::derive_rng;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// A sampled network: constant inputs plus named parameter tensors, with a
/// builder that stages `loss(params)` onto a fresh tape.
pub struct NetFixture {
    pub params: Vec<Tensor>,
    input: Tensor,
    target: Tensor,
    aux_target: Tensor,
    head_dim: usize,
}

impl NetFixture {
    /// Sample a fixture with at most ~500 parameters.
    pub fn random(seed: u64) -> Self {
        let mut rng = derive_rng(seed, "gradcheck-net", 0);
        let n = rng.gen_range(2..=4); // candidates
        let f = rng.gen_range(2..=5); // input features
        let d = rng.gen_range(2..=6); // hidden width
        let k = rng.gen_range(2..=4); // head width

        let draw = |r: usize, c: usize, rng: &mut ChaCha20Rng| {
            let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-0.9..0.9)).collect();
            Tensor::matrix(r, c, data).unwrap()
        };
        let input = draw(n, f, &mut rng);
        let target = draw(n, 1, &mut rng);
        let aux_target = draw(1, 1, &mut rng);
        let params = vec![
            draw(f, d, &mut rng), // input projection
            draw(d, k, &mut rng), // query
            draw(d, k, &mut rng), // key
            draw(d, k, &mut rng), // value
            draw(k + d, 1, &mut rng), // score head
            draw(k + d, 1, &mut rng), // pooled head
        ];
        Self {
            params,
            input,
            target,
            aux_target,
            head_dim: k,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Stage the loss for the given parameter values; returns (tape, leaf ids, loss id).
    pub fn stage(&self, params: &[Tensor]) -> (Tape, Vec<NodeId>, NodeId) {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let x = tape.leaf(self.input.clone());
        let target = tape.leaf(self.target.clone());
        let aux_target = tape.leaf(self.aux_target.clone());

        let h = tape.matmul(x, leaves[0]).unwrap();
        let h = tape.relu(h).unwrap();
        let q = tape.matmul(h, leaves[1]).unwrap();
        let kk = tape.matmul(h, leaves[2]).unwrap();
        let v = tape.matmul(h, leaves[3]).unwrap();
        let kt = tape.transpose(kk).unwrap();
        let scores = tape.matmul(q, kt).unwrap();
        let scores = tape.scale(scores, 1.0 / (self.head_dim as f64).sqrt()).unwrap();
        let attn = tape.softmax_rows(scores).unwrap();
        let mixed = tape.matmul(attn, v).unwrap();
        let cat = tape.concat_cols(&[mixed, h]).unwrap();

        let logits = tape.matmul(cat, leaves[4]).unwrap();
        let pred = tape.sigmoid(logits).unwrap();
        let pred_sq = tape.mul(pred, pred).unwrap();
        let main = tape.mse_loss(pred_sq, target).unwrap();

        // pooled auxiliary path exercising slice + a second head
        let n = self.input.shape()[0];
        let pool = tape.leaf(Tensor::matrix(1, n, vec![1.0 / n as f64; n]).unwrap());
        let pooled = tape.matmul(pool, cat).unwrap();
        let aux_logit = tape.matmul(pooled, leaves[5]).unwrap();
        let aux = tape.sigmoid(aux_logit).unwrap();
        let aux = tape.slice_cols(aux, 0, 1).unwrap();
        let aux_loss = tape.mse_loss(aux, aux_target).unwrap();
        let aux_loss = tape.scale(aux_loss, 0.25).unwrap();

        let total = tape.add(main, aux_loss).unwrap();
        (tape, leaves, total)
    }

    /// Loss value at `params` (forward only).
    pub fn loss_at(&self, params: &[Tensor]) -> f64 {
        let (tape, _, loss) = self.stage(params);
        tape.value(loss).item()
    }

    /// Gradients from the tape's reverse sweep.
    pub fn analytic_grads(&self) -> Vec<Tensor> {
        let (tape, leaves, loss) = self.stage(&self.params);
        let all = tape.backward(loss).unwrap();
        leaves.into_iter().map(|id| all[id.index()].clone()).collect()
    }

    /// Central finite differences of the loss, step `h`, forward passes only.
    pub fn fd_grads(&self, h: f64) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.params.len());
        for pi in 0..self.params.len() {
            let mut grad = vec![0.0; self.params[pi].len()];
            for j in 0..grad.len() {
                let mut plus = self.params.clone();
                plus[pi].data_mut()[j] += h;
                let mut minus = self.params.clone();
                minus[pi].data_mut()[j] -= h;
                grad[j] = (self.loss_at(&plus) - self.loss_at(&minus)) / (2.0 * h);
            }
            out.push(Tensor::new(self.params[pi].shape().to_vec(), grad).unwrap());
        }
        out
    }
}

/// Max elementwise relative error between analytic and finite-difference
/// gradients for the fixture sampled from `seed`.
pub fn max_relative_error(seed: u64) -> f64 {
    let net = NetFixture::random(seed);
    assert!(net.param_count() <= 500, "fixture exceeds 500 parameters");
    let analytic = net.analytic_grads();
    let fd = net.fd_grads(1e-5);
    let mut worst: f64 = 0.0;
    for (a, f) in analytic.iter().zip(&fd) {
        for (&av, &fv) in a.data().iter().zip(f.data()) {
            let denom = av.abs().max(fv.abs()).max(1e-4);
            worst = worst.max((av - fv).abs() / denom);
        }
    }
    worst
}
