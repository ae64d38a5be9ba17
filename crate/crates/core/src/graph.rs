//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the forward
//! value and enough information to push gradients back to its parents.
//! Parameters live outside the tape in a [`ParamStore`]; `backward` folds the
//! parameter gradients into a [`GradStore`] aligned with the store. Graphs are
//! rebuilt per sample, which keeps control flow (entity counts, spans, masks)
//! ordinary Rust.

use std::collections::HashMap;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Named parameter tensors in insertion order. Insertion order is the
/// canonical order for checkpoints and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(self.values.iter())
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }
}

/// Per-parameter gradients, aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradStore { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(t) => add_assign(t, g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Global L2 norm over every stored gradient.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for g in self.grads.iter().flatten() {
            for &x in &g.data {
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            for x in &mut g.data {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }
}

fn add_assign(a: &mut Tensor, b: &Tensor) {
    debug_assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data.iter_mut().zip(b.data.iter()) {
        *x += y;
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param(ParamId),
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// (m x n) + (1 x n) broadcast over rows.
    AddRowBroadcast(NodeId, NodeId),
    /// Row i of the first operand scaled by element i of an (m x 1) vector.
    ScaleRows(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    Reshape(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Silu(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    MinElem(NodeId, NodeId),
    MaxElem(NodeId, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::with_capacity(256) }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push(self.params.get(id).clone(), Op::Param(id))
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Constant)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor { rows: ta.rows, cols: ta.cols, data };
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let t = Tensor { rows: ta.rows, cols: ta.cols, data };
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let t = Tensor { rows: ta.rows, cols: ta.cols, data };
        self.push(t, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "div shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x / y).collect();
        let t = Tensor { rows: ta.rows, cols: ta.cols, data };
        self.push(t, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let t = self.value(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a, s))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = self.value(a).matmul(self.value(b));
        self.push(t, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(bias));
        assert_eq!(tb.rows, 1, "bias must be a row vector");
        assert_eq!(ta.cols, tb.cols, "bias width mismatch");
        let mut t = ta.clone();
        for r in 0..t.rows {
            for c in 0..t.cols {
                t.data[r * t.cols + c] += tb.data[c];
            }
        }
        self.push(t, Op::AddRowBroadcast(a, bias))
    }

    pub fn scale_rows(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let (ta, ts) = (self.value(a), self.value(s));
        assert_eq!(ts.cols, 1, "row scales must be a column vector");
        assert_eq!(ta.rows, ts.rows, "row scale length mismatch");
        let mut t = ta.clone();
        for r in 0..t.rows {
            let f = ts.data[r];
            for c in 0..t.cols {
                t.data[r * t.cols + c] *= f;
            }
        }
        self.push(t, Op::ScaleRows(a, s))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&t.data);
        }
        self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows, rows, "concat_cols height mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        self.push(Tensor { rows, cols, data }, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let t = self.value(a);
        assert!(start < end && end <= t.rows, "slice_rows out of range");
        let data = t.data[start * t.cols..end * t.cols].to_vec();
        let out = Tensor { rows: end - start, cols: t.cols, data };
        self.push(out, Op::SliceRows(a, start, end))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let t = self.value(a);
        assert!(start < end && end <= t.cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(t.rows * (end - start));
        for r in 0..t.rows {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let out = Tensor { rows: t.rows, cols: end - start, data };
        self.push(out, Op::SliceCols(a, start, end))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in idx {
            assert!(i < t.rows, "gather_rows index out of range");
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor { rows: idx.len(), cols: t.cols, data };
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape size mismatch");
        let out = Tensor { rows, cols, data: t.data.clone() };
        self.push(out, Op::Reshape(a))
    }

    /// Row-wise softmax with max-shift; the shift is constant w.r.t. gradients.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Per-row layer normalization with learned gain/offset row vectors.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        assert_eq!(tg.rows, 1);
        assert_eq!(tb.rows, 1);
        assert_eq!(tx.cols, tg.cols);
        assert_eq!(tx.cols, tb.cols);
        let n = tx.cols as f64;
        let mut out = tx.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * tg.data[c] + tb.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|x| x * sigmoid(x));
        self.push(t, Op::Silu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(softplus);
        self.push(t, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a))
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape());
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| if x <= y { x } else { y }).collect();
        let t = Tensor { rows: ta.rows, cols: ta.cols, data };
        self.push(t, Op::MinElem(a, b))
    }

    pub fn max_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape());
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| if x >= y { x } else { y }).collect();
        let t = Tensor { rows: ta.rows, cols: ta.cols, data };
        self.push(t, Op::MaxElem(a, b))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    /// Backpropagate from a scalar node, accumulating parameter gradients.
    pub fn backward(&self, loss: NodeId, grads: &mut GradStore) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        node_grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = node_grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Param(pid) => grads.accumulate(*pid, &g),
                Op::Constant => {}
                Op::Add(a, b) => {
                    acc(&mut node_grads, *a, g.clone());
                    acc(&mut node_grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut node_grads, *a, g.clone());
                    acc(&mut node_grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = mul_elem(&g, &self.nodes[b.0].value);
                    let gb = mul_elem(&g, &self.nodes[a.0].value);
                    acc(&mut node_grads, *a, ga);
                    acc(&mut node_grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let tb = &self.nodes[b.0].value;
                    let ta = &self.nodes[a.0].value;
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&tb.data).map(|(x, y)| x / y).collect(),
                    };
                    let gb = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(ta.data.iter().zip(&tb.data))
                            .map(|(gz, (x, y))| -gz * x / (y * y))
                            .collect(),
                    };
                    acc(&mut node_grads, *a, ga);
                    acc(&mut node_grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut node_grads, *a, g.map(|x| x * s)),
                Op::AddScalar(a, _) => acc(&mut node_grads, *a, g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_a_bt(&self.nodes[b.0].value);
                    let gb = self.nodes[a.0].value.matmul_at_b(&g);
                    acc(&mut node_grads, *a, ga);
                    acc(&mut node_grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut node_grads, *a, g.transpose()),
                Op::AddRowBroadcast(a, bias) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gb.data[c] += g.data[r * g.cols + c];
                        }
                    }
                    acc(&mut node_grads, *a, g);
                    acc(&mut node_grads, *bias, gb);
                }
                Op::ScaleRows(a, s) => {
                    let ta = &self.nodes[a.0].value;
                    let ts = &self.nodes[s.0].value;
                    let mut ga = g.clone();
                    let mut gs = Tensor::zeros(ts.rows, 1);
                    for r in 0..g.rows {
                        let f = ts.data[r];
                        let mut dot = 0.0;
                        for c in 0..g.cols {
                            let gv = g.data[r * g.cols + c];
                            dot += gv * ta.data[r * g.cols + c];
                            ga.data[r * g.cols + c] = gv * f;
                        }
                        gs.data[r] = dot;
                    }
                    acc(&mut node_grads, *a, ga);
                    acc(&mut node_grads, *s, gs);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.nodes[p.0].value.rows;
                        let gp = Tensor {
                            rows,
                            cols: g.cols,
                            data: g.data[start * g.cols..(start + rows) * g.cols].to_vec(),
                        };
                        acc(&mut node_grads, p, gp);
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.nodes[p.0].value.cols;
                        let mut data = Vec::with_capacity(g.rows * cols);
                        for r in 0..g.rows {
                            data.extend_from_slice(&g.row(r)[start..start + cols]);
                        }
                        acc(&mut node_grads, p, Tensor { rows: g.rows, cols, data });
                        start += cols;
                    }
                }
                Op::SliceRows(a, start, _end) => {
                    let ta = &self.nodes[a.0].value;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    ga.data[start * ta.cols..start * ta.cols + g.len()].copy_from_slice(&g.data);
                    acc(&mut node_grads, *a, ga);
                }
                Op::SliceCols(a, start, end) => {
                    let ta = &self.nodes[a.0].value;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..g.rows {
                        ga.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                    }
                    acc(&mut node_grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let ta = &self.nodes[a.0].value;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..g.cols {
                            ga.data[i * g.cols + c] += g.data[r * g.cols + c];
                        }
                    }
                    acc(&mut node_grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let ta = &self.nodes[a.0].value;
                    let ga = Tensor { rows: ta.rows, cols: ta.cols, data: g.data };
                    acc(&mut node_grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut ga = g.clone();
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols {
                            ga.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut node_grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut ga = g.clone();
                    for r in 0..y.rows {
                        let gr = g.row(r);
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..y.cols {
                            ga.data[r * y.cols + c] = gr[c] - y.row(r)[c].exp() * gsum;
                        }
                    }
                    acc(&mut node_grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let tx = &self.nodes[x.0].value;
                    let tg = &self.nodes[gamma.0].value;
                    let n = tx.cols as f64;
                    let mut gx = Tensor::zeros(tx.rows, tx.cols);
                    let mut ggamma = Tensor::zeros(1, tx.cols);
                    let mut gbeta = Tensor::zeros(1, tx.cols);
                    for r in 0..tx.rows {
                        let xr = tx.row(r);
                        let gr = g.row(r);
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        // xhat and the two row means driving the input grad
                        let mut mean_gxhat = 0.0;
                        let mut mean_gxhat_xhat = 0.0;
                        let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                        let gxhat: Vec<f64> = gr.iter().zip(tg.data.iter()).map(|(gv, gm)| gv * gm).collect();
                        for c in 0..tx.cols {
                            mean_gxhat += gxhat[c];
                            mean_gxhat_xhat += gxhat[c] * xhat[c];
                            ggamma.data[c] += gr[c] * xhat[c];
                            gbeta.data[c] += gr[c];
                        }
                        mean_gxhat /= n;
                        mean_gxhat_xhat /= n;
                        for c in 0..tx.cols {
                            gx.data[r * tx.cols + c] =
                                inv * (gxhat[c] - mean_gxhat - xhat[c] * mean_gxhat_xhat);
                        }
                    }
                    acc(&mut node_grads, *x, gx);
                    acc(&mut node_grads, *gamma, ggamma);
                    acc(&mut node_grads, *beta, gbeta);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&y.data).map(|(gv, s)| gv * s * (1.0 - s)).collect(),
                    };
                    acc(&mut node_grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&y.data).map(|(gv, t)| gv * (1.0 - t * t)).collect(),
                    };
                    acc(&mut node_grads, *a, ga);
                }
                Op::Silu(a) => {
                    let tx = &self.nodes[a.0].value;
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&tx.data)
                            .map(|(gv, &x)| {
                                let s = sigmoid(x);
                                gv * (s + x * s * (1.0 - s))
                            })
                            .collect(),
                    };
                    acc(&mut node_grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let tx = &self.nodes[a.0].value;
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&tx.data).map(|(gv, &x)| gv * sigmoid(x)).collect(),
                    };
                    acc(&mut node_grads, *a, ga);
                }
                Op::Relu(a) => {
                    let tx = &self.nodes[a.0].value;
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&tx.data)
                            .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                            .collect(),
                    };
                    acc(&mut node_grads, *a, ga);
                }
                Op::Abs(a) => {
                    let tx = &self.nodes[a.0].value;
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&tx.data)
                            .map(|(gv, &x)| if x >= 0.0 { *gv } else { -*gv })
                            .collect(),
                    };
                    acc(&mut node_grads, *a, ga);
                }
                Op::MinElem(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    let mut gb = Tensor::zeros(g.rows, g.cols);
                    for k in 0..g.len() {
                        if ta.data[k] <= tb.data[k] {
                            ga.data[k] = g.data[k];
                        } else {
                            gb.data[k] = g.data[k];
                        }
                    }
                    acc(&mut node_grads, *a, ga);
                    acc(&mut node_grads, *b, gb);
                }
                Op::MaxElem(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    let mut gb = Tensor::zeros(g.rows, g.cols);
                    for k in 0..g.len() {
                        if ta.data[k] >= tb.data[k] {
                            ga.data[k] = g.data[k];
                        } else {
                            gb.data[k] = g.data[k];
                        }
                    }
                    acc(&mut node_grads, *a, ga);
                    acc(&mut node_grads, *b, gb);
                }
                Op::SumAll(a) => {
                    let ta = &self.nodes[a.0].value;
                    acc(&mut node_grads, *a, Tensor::filled(ta.rows, ta.cols, g.item()));
                }
                Op::MeanAll(a) => {
                    let ta = &self.nodes[a.0].value;
                    let v = g.item() / ta.len() as f64;
                    acc(&mut node_grads, *a, Tensor::filled(ta.rows, ta.cols, v));
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(t) => add_assign(t, &g),
        slot @ None => *slot = Some(g),
    }
}

fn mul_elem(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow for large |x|.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` w.r.t. one parameter tensor.
    fn finite_diff(
        params: &mut ParamStore,
        id: ParamId,
        eps: f64,
        f: &dyn Fn(&ParamStore) -> f64,
    ) -> Tensor {
        let shape = params.get(id).shape();
        let mut out = Tensor::zeros(shape.0, shape.1);
        for k in 0..out.len() {
            let orig = params.get(id).data[k];
            params.get_mut(id).data[k] = orig + eps;
            let up = f(params);
            params.get_mut(id).data[k] = orig - eps;
            let down = f(params);
            params.get_mut(id).data[k] = orig;
            out.data[k] = (up - down) / (2.0 * eps);
        }
        out
    }

    fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    /// Exercises most ops in a single composite scalar readout.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut params = ParamStore::new();
        let w = params.add(
            "w",
            Tensor::from_fn(3, 4, |r, c| 0.3 * (r as f64 - 1.0) + 0.17 * c as f64 - 0.2),
        );
        let b = params.add("b", Tensor::row_vec(vec![0.1, -0.2, 0.3, 0.05]));
        let gamma = params.add("gamma", Tensor::row_vec(vec![1.1, 0.9, 1.0, 1.05]));
        let beta = params.add("beta", Tensor::row_vec(vec![0.0, 0.1, -0.1, 0.02]));
        let s = params.add("s", Tensor::col_vec(vec![0.7, -1.2]));

        let x = Tensor::from_fn(2, 3, |r, c| 0.25 * (r * 3 + c) as f64 - 0.4);

        let f = |p: &ParamStore| -> f64 {
            let mut g = Graph::new(p);
            let xw = {
                let xc = g.constant(x.clone());
                let wn = g.param(p.id_of("w").unwrap());
                g.matmul(xc, wn)
            };
            let bn = g.param(p.id_of("b").unwrap());
            let lin = g.add_row_broadcast(xw, bn);
            let gn = g.param(p.id_of("gamma").unwrap());
            let be = g.param(p.id_of("beta").unwrap());
            let ln = g.layer_norm(lin, gn, be, 1e-5);
            let act = g.silu(ln);
            let sm = g.softmax_rows(act);
            let lsm = g.log_softmax_rows(act);
            let mix = g.add(sm, lsm);
            let sn = g.param(p.id_of("s").unwrap());
            let scaled = g.scale_rows(mix, sn);
            let sig = g.sigmoid(scaled);
            let th = g.tanh(scaled);
            let prod = g.mul(sig, th);
            let sp = g.softplus(prod);
            let a = g.slice_cols(sp, 0, 2);
            let bb = g.slice_cols(sp, 2, 4);
            let mn = g.min_elem(a, bb);
            let mx = g.max_elem(a, bb);
            let d = g.div(mn, mx);
            let ab = g.abs(d);
            let cat = g.concat_cols(&[ab, mn]);
            let tr = g.transpose(cat);
            let gat = g.gather_rows(tr, &[0, 2, 1, 0]);
            let sr = g.slice_rows(gat, 1, 3);
            let sums = g.sum_all(sr);
            let means = g.mean_all(gat);
            let total = g.add(sums, means);
            g.value(total).item()
        };

        let analytic = |p: &ParamStore| -> GradStore {
            let mut g = Graph::new(p);
            let xc = g.constant(x.clone());
            let wn = g.param(p.id_of("w").unwrap());
            let xw = g.matmul(xc, wn);
            let bn = g.param(p.id_of("b").unwrap());
            let lin = g.add_row_broadcast(xw, bn);
            let gn = g.param(p.id_of("gamma").unwrap());
            let be = g.param(p.id_of("beta").unwrap());
            let ln = g.layer_norm(lin, gn, be, 1e-5);
            let act = g.silu(ln);
            let sm = g.softmax_rows(act);
            let lsm = g.log_softmax_rows(act);
            let mix = g.add(sm, lsm);
            let sn = g.param(p.id_of("s").unwrap());
            let scaled = g.scale_rows(mix, sn);
            let sig = g.sigmoid(scaled);
            let th = g.tanh(scaled);
            let prod = g.mul(sig, th);
            let sp = g.softplus(prod);
            let a = g.slice_cols(sp, 0, 2);
            let bb = g.slice_cols(sp, 2, 4);
            let mn = g.min_elem(a, bb);
            let mx = g.max_elem(a, bb);
            let d = g.div(mn, mx);
            let ab = g.abs(d);
            let cat = g.concat_cols(&[ab, mn]);
            let tr = g.transpose(cat);
            let gat = g.gather_rows(tr, &[0, 2, 1, 0]);
            let sr = g.slice_rows(gat, 1, 3);
            let sums = g.sum_all(sr);
            let means = g.mean_all(gat);
            let total = g.add(sums, means);
            let mut grads = GradStore::zeros_like(p);
            g.backward(total, &mut grads);
            grads
        };

        let grads = analytic(&params);
        for id in [w, b, gamma, beta, s] {
            let num = finite_diff(&mut params, id, 1e-5, &f);
            let ana = grads.get(id).expect("missing grad");
            let err = max_rel_err(ana, &num);
            assert!(err < 1e-6, "param {} rel err {err}", params.name(id));
        }
    }

    #[test]
    fn concat_rows_and_matmul_grads() {
        let mut params = ParamStore::new();
        let a = params.add("a", Tensor::from_fn(2, 2, |r, c| (r + c) as f64 * 0.5 + 0.1));
        let b = params.add("b", Tensor::from_fn(1, 2, |_, c| 0.3 - c as f64 * 0.4));
        let w = params.add("w", Tensor::from_fn(2, 3, |r, c| (r * 3 + c) as f64 * 0.2 - 0.5));

        let f = |p: &ParamStore| {
            let mut g = Graph::new(p);
            let an = g.param(p.id_of("a").unwrap());
            let bn = g.param(p.id_of("b").unwrap());
            let cat = g.concat_rows(&[an, bn]);
            let wn = g.param(p.id_of("w").unwrap());
            let mm = g.matmul(cat, wn);
            let s = g.sum_all(mm);
            g.value(s).item()
        };

        let mut grads = GradStore::zeros_like(&params);
        {
            let mut g = Graph::new(&params);
            let an = g.param(a);
            let bn = g.param(b);
            let cat = g.concat_rows(&[an, bn]);
            let wn = g.param(w);
            let mm = g.matmul(cat, wn);
            let s = g.sum_all(mm);
            g.backward(s, &mut grads);
        }
        for id in [a, b, w] {
            let num = finite_diff(&mut params, id, 1e-5, &f);
            let err = max_rel_err(grads.get(id).unwrap(), &num);
            assert!(err < 1e-6, "rel err {err}");
        }
    }

    #[test]
    fn param_used_twice_accumulates() {
        let mut params = ParamStore::new();
        let a = params.add("a", Tensor::scalar(1.3));
        let mut g = Graph::new(&params);
        let n1 = g.param(a);
        let n2 = g.param(a);
        let prod = g.mul(n1, n2); // a^2 -> d/da = 2a
        let mut grads = GradStore::zeros_like(&params);
        g.backward(prod, &mut grads);
        assert!((grads.get(a).unwrap().item() - 2.6).abs() < 1e-12);
    }
}
