//! Dense f64 tensors with tape-based reverse-mode autodiff and Adam.
//!
//! Everything is 64-bit and single-threaded: re-running a seeded computation
//! yields bit-identical results. The engine is deliberately small — 2-D
//! matrices plus the handful of ops a toy transformer needs. Gradients are
//! recorded on a [`Tape`]; [`Tape::backward`] consumes the tape and fills the
//! `grad` field of every recorded tensor that requires one.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ctc;
use crate::error::CoreError;

/// Epsilon inside the layer-norm square root.
pub const LN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// A dense array of f64 values with an optional gradient of the same length.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(shape.iter().all(|&d| d > 0), "tensor dims must be positive");
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![v], [1])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor::new(vec![0.0; numel], shape)
    }

    /// Normally distributed entries with the given standard deviation.
    pub fn randn(rng: &mut ChaCha8Rng, shape: impl Into<Vec<usize>>, std: f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| gauss(rng) * std).collect();
        Tensor::new(data, shape)
    }

    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected a 2-D tensor, got {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected a 2-D tensor, got {:?}", self.shape);
        self.shape[1]
    }
}

/// Box–Muller; two uniform draws per normal sample keeps the stream simple.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNormRows { a: NodeId, gain: NodeId, bias: NodeId },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    Sum { a: NodeId },
    GatherRows { src: NodeId, indices: Vec<usize> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    ReplaceRows { base: NodeId, rows: NodeId, positions: Vec<usize> },
    Dropout { a: NodeId, mask: Vec<f64> },
    CrossEntropyRows { logits: NodeId, targets: Vec<usize>, weights: Vec<f64> },
    CtcNll { logits: NodeId, labels: Vec<usize>, blank: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations in topological order; inputs always precede outputs.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true, consumed: false }
    }

    /// Enable or disable gradient recording. While disabled, new nodes are
    /// leaves: values are still computed but backward never reaches them.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Watermark for [`Tape::truncate`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drop every node recorded after `mark`. Only safe when nothing before
    /// the mark references the dropped region, which holds by construction
    /// (inputs precede outputs).
    pub fn truncate(&mut self, mark: usize) {
        assert!(!self.consumed, "tape already consumed by backward");
        self.nodes.truncate(mark);
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push_node(t, Op::Leaf)
    }

    /// A leaf that never takes gradients regardless of recording state.
    pub fn constant(&mut self, data: Vec<f64>, shape: impl Into<Vec<usize>>) -> NodeId {
        self.push_node(Tensor::new(data, shape), Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    /// Per-row argmax of a 2-D node; ties break toward the lowest index.
    pub fn argmax_rows(&self, id: NodeId) -> Vec<usize> {
        let t = self.value(id);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        out
    }

    fn push_node(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[NodeId]) -> NodeId {
        let track = self.recording && inputs.iter().any(|&i| self.nodes[i.0].value.requires_grad);
        let mut value = Tensor::new(data, shape);
        if track {
            value = value.requiring_grad();
            self.push_node(value, op)
        } else {
            self.push_node(value, Op::Leaf)
        }
    }

    // -- forward ops --------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, n) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(k, k2, "matmul dimension error: [{m}x{k}] x [{k2}x{n}]");
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        self.push(data, vec![m, n], Op::Matmul { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::Add { a, b }, &[a, b])
    }

    /// Add a length-`n` bias to every row of an `[m x n]` tensor.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.value(bias).numel(), n, "bias length mismatch");
        let bv = self.data(bias).to_vec();
        let mut data = self.data(a).to_vec();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += bv[c];
            }
        }
        self.push(data, vec![m, n], Op::AddRow { a, bias }, &[a, bias])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::Scale { a, c }, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::Relu { a }, &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert!(n >= 1);
        let data = softmax_rows_raw(self.data(a), m, n);
        self.push(data, vec![m, n], Op::SoftmaxRows { a }, &[a])
    }

    /// Per-row standardization followed by a shared elementwise affine.
    pub fn layer_norm_rows(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (m, d) = (self.value(a).rows(), self.value(a).cols());
        assert!(d >= 2, "layer norm requires row width >= 2");
        assert_eq!(self.value(gain).numel(), d);
        assert_eq!(self.value(bias).numel(), d);
        let g = self.data(gain).to_vec();
        let b = self.data(bias).to_vec();
        let x = self.data(a);
        let mut data = vec![0.0; m * d];
        for r in 0..m {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..d {
                data[r * d + c] = (row[c] - mean) * inv_std * g[c] + b[c];
            }
        }
        self.push(data, vec![m, d], Op::LayerNormRows { a, gain, bias }, &[a, gain, bias])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        let x = self.data(a);
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = x[r * n + c];
            }
        }
        self.push(data, vec![n, m], Op::Transpose { a }, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> NodeId {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.value(a).numel(), "reshape must preserve element count");
        let data = self.data(a).to_vec();
        self.push(data, shape, Op::Reshape { a }, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.data(a).iter().sum();
        self.push(vec![s], vec![1], Op::Sum { a }, &[a])
    }

    /// Rows of `src` at `indices`, in order; duplicates allowed.
    pub fn gather_rows(&mut self, src: NodeId, indices: &[usize]) -> NodeId {
        let (m, n) = (self.value(src).rows(), self.value(src).cols());
        let x = self.data(src);
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            assert!(i < m, "gather_rows index {i} out of range ({m} rows)");
            data.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        self.push(
            data,
            vec![indices.len(), n],
            Op::GatherRows { src, indices: indices.to_vec() },
            &[src],
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert!(start + len <= m, "slice_rows out of range");
        let data = self.data(a)[start * n..(start + len) * n].to_vec();
        self.push(data, vec![len, n], Op::SliceRows { a, start }, &[a])
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert!(start + len <= n, "slice_cols out of range");
        let x = self.data(a);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&x[r * n + start..r * n + start + len]);
        }
        self.push(data, vec![m, len], Op::SliceCols { a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                let n = self.value(p).cols();
                assert_eq!(self.value(p).rows(), m, "concat_cols row mismatch");
                data.extend_from_slice(&self.data(p)[r * n..(r + 1) * n]);
            }
        }
        self.push(data, vec![m, total], Op::ConcatCols { parts: parts.to_vec() }, parts)
    }

    /// Copy of `base` with row `positions[i]` replaced by row `i` of `rows`.
    /// Positions must be strictly increasing.
    pub fn replace_rows(&mut self, base: NodeId, rows: NodeId, positions: &[usize]) -> NodeId {
        let (m, n) = (self.value(base).rows(), self.value(base).cols());
        assert_eq!(self.value(rows).cols(), n, "replacement width mismatch");
        assert_eq!(self.value(rows).rows(), positions.len(), "one replacement row per position");
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "positions must be strictly increasing");
        let mut data = self.data(base).to_vec();
        let rep = self.data(rows).to_vec();
        for (i, &p) in positions.iter().enumerate() {
            assert!(p < m, "replace_rows position {p} out of range ({m} rows)");
            data[p * n..(p + 1) * n].copy_from_slice(&rep[i * n..(i + 1) * n]);
        }
        self.push(
            data,
            vec![m, n],
            Op::ReplaceRows { base, rows, positions: positions.to_vec() },
            &[base, rows],
        )
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-rate).
    pub fn dropout(&mut self, a: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        if rate == 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::Dropout { a, mask }, &[a])
    }

    /// Weighted sum of per-row negative log-likelihoods:
    /// `sum_t weights[t] * (-log softmax(logits[t])[targets[t]])`.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize], weights: &[f64]) -> NodeId {
        let (m, n) = (self.value(logits).rows(), self.value(logits).cols());
        assert_eq!(targets.len(), m, "one target per row");
        assert_eq!(weights.len(), m, "one weight per row");
        let x = self.data(logits);
        let mut total = 0.0;
        for r in 0..m {
            let t = targets[r];
            assert!(t < n, "cross entropy index error: target {t} out of range ({n} classes)");
            let row = &x[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += weights[r] * (lse - row[t]);
        }
        self.push(
            vec![total],
            vec![1],
            Op::CrossEntropyRows { logits, targets: targets.to_vec(), weights: weights.to_vec() },
            &[logits],
        )
    }

    /// Negative log-likelihood of a single row of logits (1-D or `[1 x n]`).
    pub fn cross_entropy_row(&mut self, logits: NodeId, target: usize) -> NodeId {
        let n = self.value(logits).numel();
        let flat = self.reshape(logits, [1, n]);
        self.cross_entropy_rows(flat, &[target], &[1.0])
    }

    /// CTC negative log-likelihood of `labels` under `[L x C]` logits.
    /// Errors when no alignment of `labels` fits within `L` frames.
    pub fn ctc_nll(&mut self, logits: NodeId, labels: &[usize], blank: usize) -> Result<NodeId, CoreError> {
        let (l, c) = (self.value(logits).rows(), self.value(logits).cols());
        assert!(blank < c, "blank id out of range");
        for &y in labels {
            assert!(y < c && y != blank, "ctc label out of range or equal to blank");
        }
        let log_probs = log_softmax_rows_raw(self.data(logits), l, c);
        let nll = ctc::forward_nll(&log_probs, l, c, labels, blank).ok_or(CoreError::CtcInfeasible {
            target_len: labels.len(),
            output_len: l,
        })?;
        Ok(self.push(
            vec![nll],
            vec![1],
            Op::CtcNll { logits, labels: labels.to_vec(), blank },
            &[logits],
        ))
    }

    // -- backward -----------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Populates the `grad` field of
    /// every recorded tensor that requires one and consumes the tape: no
    /// further ops or backward calls are permitted afterwards.
    pub fn backward(&mut self, loss: NodeId) {
        assert!(!self.consumed, "tape already consumed by backward");
        assert_eq!(self.value(loss).numel(), 1, "backward requires a scalar loss");
        self.consumed = true;
        self.nodes[loss.0].value.grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].value.grad.is_none() {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let g = self.nodes[i].value.grad.take().expect("grad present");
            self.backprop_op(i, &op, &g);
            self.nodes[i].value.grad = Some(g);
            self.nodes[i].op = op;
        }
    }

    fn wants_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    fn acc(&mut self, id: NodeId, contrib: &[f64]) {
        if self.wants_grad(id) {
            self.nodes[id.0].value.accumulate_grad(contrib);
        }
    }

    fn backprop_op(&mut self, out: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.wants_grad(*a) {
                    // dA = g . B^T
                    let bd = self.data(*b);
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..n {
                            let gv = g[r * n + c];
                            if gv != 0.0 {
                                for p in 0..k {
                                    da[r * k + p] += gv * bd[p * n + c];
                                }
                            }
                        }
                    }
                    self.acc(*a, &da);
                }
                if self.wants_grad(*b) {
                    // dB = A^T . g
                    let ad = self.data(*a);
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av != 0.0 {
                                for c in 0..n {
                                    db[p * n + c] += av * g[r * n + c];
                                }
                            }
                        }
                    }
                    self.acc(*b, &db);
                }
            }
            Op::Add { a, b } => {
                self.acc(*a, g);
                self.acc(*b, g);
            }
            Op::AddRow { a, bias } => {
                self.acc(*a, g);
                if self.wants_grad(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![0.0; n];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    self.acc(*bias, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.acc(*a, &da);
            }
            Op::Relu { a } => {
                let x = self.data(*a);
                let da: Vec<f64> =
                    g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect();
                self.acc(*a, &da);
            }
            Op::SoftmaxRows { a } => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let s = self.data(NodeId(out));
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let srow = &s[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                    for c in 0..n {
                        da[r * n + c] = srow[c] * (grow[c] - dot);
                    }
                }
                self.acc(*a, &da);
            }
            Op::LayerNormRows { a, gain, bias } => {
                let (m, d) = (self.value(*a).rows(), self.value(*a).cols());
                let x = self.data(*a).to_vec();
                let gv = self.data(*gain).to_vec();
                let mut da = vec![0.0; m * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let df = d as f64;
                for r in 0..m {
                    let row = &x[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / df;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    let inv_std = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![0.0; d];
                    for c in 0..d {
                        dgain[c] += grow[c] * xhat[c];
                        dbias[c] += grow[c];
                        dxhat[c] = grow[c] * gv[c];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        da[r * d + c] =
                            inv_std / df * (df * dxhat[c] - sum_dxhat - xhat[c] * sum_dxhat_xhat);
                    }
                }
                self.acc(*a, &da);
                self.acc(*gain, &dgain);
                self.acc(*bias, &dbias);
            }
            Op::Transpose { a } => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                // output is [n x m]; transpose g back to [m x n]
                let mut da = vec![0.0; m * n];
                for r in 0..n {
                    for c in 0..m {
                        da[c * n + r] = g[r * m + c];
                    }
                }
                self.acc(*a, &da);
            }
            Op::Reshape { a } => {
                self.acc(*a, g);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.value(*a).numel()];
                self.acc(*a, &da);
            }
            Op::GatherRows { src, indices } => {
                if self.wants_grad(*src) {
                    let (m, n) = (self.value(*src).rows(), self.value(*src).cols());
                    let mut da = vec![0.0; m * n];
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..n {
                            da[i * n + c] += g[r * n + c];
                        }
                    }
                    self.acc(*src, &da);
                }
            }
            Op::SliceRows { a, start } => {
                if self.wants_grad(*a) {
                    let n = self.value(*a).cols();
                    let mut da = vec![0.0; self.value(*a).numel()];
                    da[start * n..start * n + g.len()].copy_from_slice(g);
                    self.acc(*a, &da);
                }
            }
            Op::SliceCols { a, start } => {
                if self.wants_grad(*a) {
                    let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                    let w = g.len() / m;
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        da[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    self.acc(*a, &da);
                }
            }
            Op::ConcatCols { parts } => {
                let m = self.value(parts[0]).rows();
                let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).cols();
                    if self.wants_grad(p) {
                        let mut dp = vec![0.0; m * n];
                        for r in 0..m {
                            dp[r * n..(r + 1) * n]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + n]);
                        }
                        self.acc(p, &dp);
                    }
                    offset += n;
                }
            }
            Op::ReplaceRows { base, rows, positions } => {
                let n = self.value(*base).cols();
                if self.wants_grad(*base) {
                    let mut db = g.to_vec();
                    for &p in positions {
                        db[p * n..(p + 1) * n].fill(0.0);
                    }
                    self.acc(*base, &db);
                }
                if self.wants_grad(*rows) {
                    let mut dr = vec![0.0; positions.len() * n];
                    for (i, &p) in positions.iter().enumerate() {
                        dr[i * n..(i + 1) * n].copy_from_slice(&g[p * n..(p + 1) * n]);
                    }
                    self.acc(*rows, &dr);
                }
            }
            Op::Dropout { a, mask } => {
                let da: Vec<f64> = g.iter().zip(mask).map(|(gv, mv)| gv * mv).collect();
                self.acc(*a, &da);
            }
            Op::CrossEntropyRows { logits, targets, weights } => {
                if self.wants_grad(*logits) {
                    let (m, n) = (self.value(*logits).rows(), self.value(*logits).cols());
                    let probs = softmax_rows_raw(self.data(*logits), m, n);
                    let mut da = probs;
                    for r in 0..m {
                        for c in 0..n {
                            let delta = if c == targets[r] { 1.0 } else { 0.0 };
                            da[r * n + c] = g[0] * weights[r] * (da[r * n + c] - delta);
                        }
                    }
                    self.acc(*logits, &da);
                }
            }
            Op::CtcNll { logits, labels, blank } => {
                if self.wants_grad(*logits) {
                    let (l, c) = (self.value(*logits).rows(), self.value(*logits).cols());
                    let log_probs = log_softmax_rows_raw(self.data(*logits), l, c);
                    let mut da = ctc::grad_wrt_logits(&log_probs, l, c, labels, *blank);
                    for v in da.iter_mut() {
                        *v *= g[0];
                    }
                    self.acc(*logits, &da);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Raw kernels shared by forward ops, backward rules and inference paths
// ---------------------------------------------------------------------------

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for p in 0..k {
            let av = a[r * k + p];
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[r * n..(r + 1) * n];
                for c in 0..n {
                    orow[c] += av * brow[c];
                }
            }
        }
    }
    out
}

/// Row-wise softmax on raw values.
pub fn softmax_rows_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &x[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..n {
            let e = (row[c] - max).exp();
            out[r * n + c] = e;
            sum += e;
        }
        for c in 0..n {
            out[r * n + c] /= sum;
        }
    }
    out
}

/// Row-wise log-softmax on raw values (shared by losses and rerankers).
pub fn log_softmax_rows_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &x[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for c in 0..n {
            out[r * n + c] = row[c] - lse;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with bias correction. Moment slots are keyed by parameter name so the
/// optimizer survives checkpoint round-trips; update order follows the slice
/// passed to [`Adam::step`], keeping runs deterministic.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, slots: HashMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over named parameters. Every tensor must carry a gradient
    /// (populate with zeros for parameters outside the current loss); grads
    /// are consumed and cleared.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, tensor) in params.iter_mut() {
            let grad = tensor
                .take_grad()
                .unwrap_or_else(|| panic!("adam contract error: missing grad for {name}"));
            let n = grad.len();
            let (m, v) = self
                .slots
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let data = tensor.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Moment slots in name order, for checkpointing.
    pub fn export_state(&self) -> (u64, Vec<(String, Vec<f64>, Vec<f64>)>) {
        let mut entries: Vec<_> = self
            .slots
            .iter()
            .map(|(k, (m, v))| (k.clone(), m.clone(), v.clone()))
            .collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        (self.t, entries)
    }

    pub fn import_state(&mut self, t: u64, entries: Vec<(String, Vec<f64>, Vec<f64>)>) {
        self.t = t;
        self.slots = entries.into_iter().map(|(k, m, v)| (k, (m, v))).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 0.0, 0.0, 1.0], [2, 2]);
        let b = tape.constant(vec![3.0, 4.0, 5.0, 6.0], [2, 2]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], [1, 2]);
        let b = tape.constant(vec![3.0, 4.0], [2, 1]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_reference() {
        let mut r = rng(7);
        let a: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        // independent naive reference, plain i-j-p order
        let mut expect = vec![0.0; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a[i * 4 + p] * b[p * 2 + j];
                }
                expect[i * 2 + j] = s;
            }
        }
        let mut tape = Tape::new();
        let an = tape.constant(a, [3, 4]);
        let bn = tape.constant(b, [4, 2]);
        let cn = tape.matmul(an, bn);
        for (x, y) in tape.data(cn).iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "dimension error")]
    fn matmul_shape_mismatch_panics() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 6], [2, 3]);
        let b = tape.constant(vec![0.0; 4], [2, 2]);
        tape.matmul(a, b);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0, 0.0], [1, 2]);
        let s = tape.softmax_rows(a);
        assert_eq!(tape.data(s), &[0.5, 0.5]);

        let big = tape.constant(vec![1000.0, 1000.0], [1, 2]);
        let s2 = tape.softmax_rows(big);
        assert_eq!(tape.data(s2), &[0.5, 0.5]);

        let t = tape.constant(vec![1.0, 2.0, 3.0], [1, 3]);
        let s3 = tape.softmax_rows(t);
        let sum: f64 = tape.data(s3).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_basics() {
        let mut tape = Tape::new();
        let gain = tape.constant(vec![1.0, 1.0, 1.0], [3]);
        let bias = tape.constant(vec![0.0, 0.0, 0.0], [3]);

        // constant row maps to zeros through the epsilon
        let c = tape.constant(vec![5.0, 5.0, 5.0], [1, 3]);
        let ln = tape.layer_norm_rows(c, gain, bias);
        for v in tape.data(ln) {
            assert!(v.abs() < 1e-9);
        }

        // [1, -1] already has unit variance
        let g2 = tape.constant(vec![1.0, 1.0], [2]);
        let b2 = tape.constant(vec![0.0, 0.0], [2]);
        let x = tape.constant(vec![1.0, -1.0], [1, 2]);
        let ln2 = tape.layer_norm_rows(x, g2, b2);
        assert!((tape.data(ln2)[0] - 1.0).abs() < 1e-4);
        assert!((tape.data(ln2)[1] + 1.0).abs() < 1e-4);

        // random row standardizes
        let mut r = rng(3);
        let d = 16;
        let row: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let g3 = tape.constant(vec![1.0; d], [d]);
        let b3 = tape.constant(vec![0.0; d], [d]);
        let xr = tape.constant(row, [1, d]);
        let out = tape.layer_norm_rows(xr, g3, b3);
        let od = tape.data(out);
        let mean: f64 = od.iter().sum::<f64>() / d as f64;
        let var: f64 = od.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_known_values() {
        let mut tape = Tape::new();
        let l1 = tape.constant(vec![0.0, 0.0], [2]);
        let e1 = tape.cross_entropy_row(l1, 0);
        assert!((tape.data(e1)[0] - 2f64.ln()).abs() < 1e-12);

        let l2 = tape.constant(vec![10.0, -10.0], [2]);
        let e2 = tape.cross_entropy_row(l2, 0);
        assert!(tape.data(e2)[0] < 1e-4);

        // random logits against the direct formula
        let mut r = rng(11);
        let row: Vec<f64> = (0..5).map(|_| r.gen_range(-3.0..3.0)).collect();
        let target = 3usize;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let expect = lse - row[target];
        let l3 = tape.constant(row, [5]);
        let e3 = tape.cross_entropy_row(l3, target);
        assert!((tape.data(e3)[0] - expect).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "index error")]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::new();
        let l = tape.constant(vec![0.0, 0.0], [2]);
        tape.cross_entropy_row(l, 2);
    }

    #[test]
    fn backward_sum_gives_ones_and_square_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1.0, -2.0, 0.5], [1, 3]).requiring_grad());
        let s = tape.sum(x);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        // loss = x . x^T at x = [3] has gradient 2x = [6]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3.0], [1, 1]).requiring_grad());
        let xt = tape.transpose(x);
        let sq = tape.matmul(x, xt);
        let loss = tape.sum(sq);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    #[should_panic(expected = "scalar")]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1.0, 2.0], [1, 2]).requiring_grad());
        tape.backward(x);
    }

    #[test]
    #[should_panic(expected = "consumed")]
    fn backward_consumes_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1.0], [1]).requiring_grad());
        let s = tape.sum(x);
        tape.backward(s);
        tape.backward(s);
    }

    #[test]
    fn recording_off_blocks_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2.0], [1, 1]).requiring_grad());
        tape.set_recording(false);
        let y = tape.scale(x, 3.0);
        tape.set_recording(true);
        let z = tape.scale(y, 2.0);
        let loss = tape.sum(z);
        tape.backward(loss);
        assert_eq!(tape.data(y), &[6.0]);
        assert!(tape.grad(x).is_none(), "no gradient may flow through unrecorded ops");
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let mut t = Tensor::new(vec![0.0], [1]).requiring_grad();
        t.accumulate_grad(&[1.0]);
        let mut opt = Adam::new(1e-3);
        opt.step(&mut [("p", &mut t)]);
        assert!((t.data()[0] + 1e-3).abs() < 1e-9, "bias-corrected first step moves by -lr");

        // zero grad leaves the parameter unchanged
        let mut t2 = Tensor::new(vec![0.7], [1]).requiring_grad();
        t2.accumulate_grad(&[0.0]);
        let mut opt2 = Adam::new(1e-3);
        opt2.step(&mut [("p", &mut t2)]);
        assert_eq!(t2.data()[0], 0.7);
    }

    #[test]
    fn adam_identical_params_get_identical_updates() {
        let mut a = Tensor::new(vec![0.3], [1]).requiring_grad();
        let mut b = Tensor::new(vec![0.3], [1]).requiring_grad();
        a.accumulate_grad(&[0.5]);
        b.accumulate_grad(&[0.5]);
        let mut opt = Adam::new(1e-2);
        opt.step(&mut [("a", &mut a), ("b", &mut b)]);
        assert_eq!(a.data()[0], b.data()[0]);
        assert!(a.grad().is_none(), "grads cleared after step");
    }

    #[test]
    #[should_panic(expected = "missing grad")]
    fn adam_missing_grad_is_contract_error() {
        let mut t = Tensor::new(vec![0.0], [1]).requiring_grad();
        let mut opt = Adam::new(1e-3);
        opt.step(&mut [("p", &mut t)]);
    }

    #[test]
    fn seeded_computation_is_bit_identical() {
        let run = || {
            let mut r = rng(99);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::randn(&mut r, [4, 4], 0.5).requiring_grad());
            let w = tape.leaf(Tensor::randn(&mut r, [4, 4], 0.5).requiring_grad());
            let h = tape.matmul(x, w);
            let h = tape.relu(h);
            let h = tape.dropout(h, 0.25, &mut r);
            let s = tape.softmax_rows(h);
            let loss = tape.sum(s);
            tape.backward(loss);
            (tape.data(loss).to_vec(), tape.grad(w).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }
}
