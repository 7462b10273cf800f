//! Wengert tape: records forward ops, replays them in reverse for gradients.
//!
//! Nodes are appended in execution order, so every input id precedes its
//! consumers and a single reverse sweep implements the chain rule. The tape
//! is single-threaded by design; build one per forward pass.

use super::{NnError, Result, Tensor};

/// Index of a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    MseLoss(NodeId, NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded computation graph over the fixed op set.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(nodes),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Register an input tensor (parameter or constant) on the tape.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(NnError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        mat_mul(m, k, n, ta.data(), tb.data(), &mut out);
        let value = Tensor::new(vec![m, n], out).map_err(|_| NnError::NonFinite { op: "matmul" })?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(NnError::ShapeMismatch {
                op: "transpose",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::Transpose(a), value))
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(NnError::EmptyTensor { op: "softmax_rows" });
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ta.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(Op::SoftmaxRows(a), value))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(Op::Relu(a), value))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(Op::Sigmoid(a), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_pointwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_pointwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary_pointwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(NnError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out).map_err(|_| NnError::NonFinite { op: name })?;
        Ok(self.push(op, value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(NnError::NonFinite { op: "scale" });
        }
        let out: Vec<f64> = self.value(a).data().iter().map(|&v| v * factor).collect();
        let value =
            Tensor::new(self.value(a).shape().to_vec(), out).map_err(|_| NnError::NonFinite { op: "scale" })?;
        Ok(self.push(Op::Scale(a, factor), value))
    }

    /// Concatenate 2-D tensors side by side (equal row counts).
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(NnError::EmptyTensor { op: "concat_cols" });
        }
        let m = self.value(parts[0]).rows();
        let mut total_cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != m {
                return Err(NnError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            total_cols += t.cols();
        }
        let mut out = vec![0.0; m * total_cols];
        let mut col_off = 0;
        for &p in parts {
            let t = self.value(p);
            let n = t.cols();
            for i in 0..m {
                out[i * total_cols + col_off..i * total_cols + col_off + n]
                    .copy_from_slice(&t.data()[i * n..(i + 1) * n]);
            }
            col_off += n;
        }
        let value = Tensor::new(vec![m, total_cols], out)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if start >= end || end > n {
            return Err(NnError::InvalidArgument(format!(
                "slice_cols [{start}, {end}) out of range for {n} columns"
            )));
        }
        let w = end - start;
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&ta.data()[i * n + start..i * n + end]);
        }
        let value = Tensor::new(vec![m, w], out)?;
        Ok(self.push(Op::SliceCols(a, start, end), value))
    }

    /// Mean over all elements of the squared difference; scalar output.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if !tp.same_shape(tt) {
            return Err(NnError::ShapeMismatch {
                op: "mse_loss",
                lhs: tp.shape().to_vec(),
                rhs: tt.shape().to_vec(),
            });
        }
        let n = tp.len() as f64;
        let sum: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let value = Tensor::scalar(sum / n).map_err(|_| NnError::NonFinite { op: "mse_loss" })?;
        Ok(self.push(Op::MseLoss(pred, target), value))
    }

    /// Exact reverse-mode gradients of the scalar `loss` node with respect to
    /// every node on the tape. Nodes the loss does not reach get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Tensor>> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(NnError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        adj[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if adj[idx].iter().all(|&v| v == 0.0) {
                continue;
            }
            let grad = std::mem::take(&mut adj[idx]);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    adj[idx] = grad; // keep for the caller
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    // dA += dC · Bᵀ
                    mat_mul_bt(m, n, k, &grad, tb.data(), &mut adj[a.0]);
                    // dB += Aᵀ · dC
                    mat_mul_at(k, m, n, ta.data(), &grad, &mut adj[b.0]);
                    adj[idx] = grad;
                }
                Op::Transpose(a) => {
                    let (n, m) = (node.value.rows(), node.value.cols());
                    let da = &mut adj[a.0];
                    for i in 0..n {
                        for j in 0..m {
                            da[j * n + i] += grad[i * m + j];
                        }
                    }
                    adj[idx] = grad;
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.data();
                    let (m, n) = (node.value.rows(), node.value.cols());
                    let da = &mut adj[a.0];
                    for i in 0..m {
                        let row = i * n;
                        let dot: f64 = (0..n).map(|j| grad[row + j] * y[row + j]).sum();
                        for j in 0..n {
                            da[row + j] += y[row + j] * (grad[row + j] - dot);
                        }
                    }
                    adj[idx] = grad;
                }
                Op::Relu(a) => {
                    let x = self.nodes[a.0].value.data();
                    let da = &mut adj[a.0];
                    for (j, &g) in grad.iter().enumerate() {
                        if x[j] > 0.0 {
                            da[j] += g;
                        }
                    }
                    adj[idx] = grad;
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let da = &mut adj[a.0];
                    for (j, &g) in grad.iter().enumerate() {
                        da[j] += g * y[j] * (1.0 - y[j]);
                    }
                    adj[idx] = grad;
                }
                Op::Add(a, b) => {
                    for (j, &g) in grad.iter().enumerate() {
                        adj[a.0][j] += g;
                    }
                    for (j, &g) in grad.iter().enumerate() {
                        adj[b.0][j] += g;
                    }
                    adj[idx] = grad;
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    for (j, &g) in grad.iter().enumerate() {
                        adj[a.0][j] += g * tb.data()[j];
                    }
                    for (j, &g) in grad.iter().enumerate() {
                        adj[b.0][j] += g * ta.data()[j];
                    }
                    adj[idx] = grad;
                }
                Op::Scale(a, c) => {
                    for (j, &g) in grad.iter().enumerate() {
                        adj[a.0][j] += g * c;
                    }
                    adj[idx] = grad;
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let m = node.value.rows();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.cols();
                        let dp = &mut adj[p.0];
                        for i in 0..m {
                            for j in 0..w {
                                dp[i * w + j] += grad[i * total + off + j];
                            }
                        }
                        off += w;
                    }
                    adj[idx] = grad;
                }
                Op::SliceCols(a, start, _end) => {
                    let n = self.nodes[a.0].value.cols();
                    let (m, w) = (node.value.rows(), node.value.cols());
                    let da = &mut adj[a.0];
                    for i in 0..m {
                        for j in 0..w {
                            da[i * n + start + j] += grad[i * w + j];
                        }
                    }
                    adj[idx] = grad;
                }
                Op::MseLoss(p, t) => {
                    let (tp, tt) = (&self.nodes[p.0].value, &self.nodes[t.0].value);
                    let n = tp.len() as f64;
                    let g = grad[0];
                    {
                        let dp = &mut adj[p.0];
                        for j in 0..tp.len() {
                            dp[j] += g * 2.0 * (tp.data()[j] - tt.data()[j]) / n;
                        }
                    }
                    {
                        let dt = &mut adj[t.0];
                        for j in 0..tp.len() {
                            dt[j] -= g * 2.0 * (tp.data()[j] - tt.data()[j]) / n;
                        }
                    }
                    adj[idx] = grad;
                }
            }
        }

        self.nodes
            .iter()
            .zip(adj)
            .map(|(n, g)| Tensor::new(n.value.shape().to_vec(), g))
            .collect()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// out += a[m×k] · b[k×n], flattened row-major.
pub(crate) fn mat_mul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += a[m×n] · b[k×n]ᵀ  →  [m×k]
fn mat_mul_bt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            out[i * k + p] += acc;
        }
    }
}

/// out += a[m×k]ᵀ · b[m×n]  →  [k×n]
fn mat_mul_at(k: usize, m: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}
