//! Eager reverse-mode tape. Building an op computes its value immediately;
//! `backward` walks the tape in reverse and accumulates gradients for every
//! node tagged as a parameter.
//!
//! The op set is closed and small on purpose: matmul, transpose, add (with
//! row-vector broadcast), elementwise mul, scale, gelu/relu, row softmax,
//! layer norm, embedding lookup, masked fill, masked cross-entropy, L1 loss,
//! concat and slice along either axis of a 2-D tensor. Everything the model
//! computes is expressed in these.

use std::sync::Arc;

use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
pub(crate) enum Op<S> {
    Input,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    Gelu(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: S,
    },
    Embedding {
        table: NodeId,
        indices: Arc<Vec<u32>>,
    },
    MaskedFill {
        x: NodeId,
        blocked: Arc<Vec<bool>>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Arc<Vec<u32>>,
        rows: Arc<Vec<bool>>,
    },
    L1Loss {
        pred: NodeId,
        target: Tensor<S>,
    },
    Concat(Vec<NodeId>, Axis),
    Slice {
        x: NodeId,
        axis: Axis,
        start: usize,
        len: usize,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::MaskedFill { .. } => "masked_fill",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L1Loss { .. } => "l1_loss",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
        }
    }
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    param: Option<usize>,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Op::Input, t)
    }

    /// Leaf tensor whose gradient is collected under `param_idx`.
    pub fn param(&mut self, param_idx: usize, t: Tensor<S>) -> NodeId {
        let id = self.push(Op::Input, t);
        self.nodes[id.0].param = Some(param_idx);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        matmul_nn(av.data(), bv.data(), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::from_rows(m, n, out))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        self.push(Op::Transpose(a), Tensor::from_rows(n, m, out))
    }

    /// Elementwise add; `b` may also be a rank-1 row vector broadcast over
    /// every row of 2-D `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let out = if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| x + y)
                .collect();
            Tensor::new(av.shape().to_vec(), data)
        } else {
            assert!(
                bv.shape().len() == 1 && av.cols() == bv.numel(),
                "add: incompatible shapes {:?} vs {:?}",
                av.shape(),
                bv.shape()
            );
            let cols = av.cols();
            let data = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bv.data()[i % cols])
                .collect();
            Tensor::new(av.shape().to_vec(), data)
        };
        self.push(Op::Add(a, b), out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x * c).collect());
        self.push(Op::Scale(a, c), out)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| gelu(x)).collect());
        self.push(Op::Gelu(a), out)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|&x| x.max(S::zero())).collect(),
        );
        self.push(Op::Relu(a), out)
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            softmax_row(&av.data()[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        self.push(Op::Softmax(a), Tensor::from_rows(m, n, out))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> NodeId {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = (xv.rows(), xv.cols());
        assert_eq!(gv.numel(), n, "layer_norm gamma size");
        assert_eq!(bv.numel(), n, "layer_norm beta size");
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let (mean, rstd) = moments(row, eps);
            for j in 0..n {
                out[i * n + j] = gv.data()[j] * (row[j] - mean) * rstd + bv.data()[j];
            }
        }
        self.push(
            Op::LayerNorm { x, gamma, beta, eps },
            Tensor::from_rows(m, n, out),
        )
    }

    /// Rows of `table` gathered by index.
    pub fn embedding(&mut self, table: NodeId, indices: Arc<Vec<u32>>) -> NodeId {
        let tv = self.value(table);
        let (v, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices.iter() {
            let ix = ix as usize;
            assert!(ix < v, "embedding index {ix} out of table size {v}");
            out.extend_from_slice(&tv.data()[ix * d..(ix + 1) * d]);
        }
        let n = indices.len();
        self.push(Op::Embedding { table, indices }, Tensor::from_rows(n, d, out))
    }

    /// Replaces entries where `blocked` is true with `fill`.
    pub fn masked_fill(&mut self, x: NodeId, blocked: Arc<Vec<bool>>, fill: S) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.numel(), blocked.len(), "masked_fill mask size");
        let data = xv
            .data()
            .iter()
            .zip(blocked.iter())
            .map(|(&v, &b)| if b { fill } else { v })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data);
        self.push(Op::MaskedFill { x, blocked }, out)
    }

    /// Mean cross-entropy of `logits` rows against `targets`, restricted to
    /// rows where `rows` is true. Scalar output.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Arc<Vec<u32>>,
        rows: Arc<Vec<bool>>,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        let (m, n) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), m, "cross_entropy targets length");
        assert_eq!(rows.len(), m, "cross_entropy row mask length");
        let selected = rows.iter().filter(|&&b| b).count();
        if selected == 0 {
            return Err(Error::EmptyLossMask);
        }
        let mut total = S::zero();
        for i in 0..m {
            if !rows[i] {
                continue;
            }
            let row = &lv.data()[i * n..(i + 1) * n];
            let t = targets[i] as usize;
            assert!(t < n, "cross_entropy target {t} out of {n}");
            total = total + log_sum_exp(row) - row[t];
        }
        let loss = total / S::from_config(selected as f64);
        Ok(self.push(
            Op::CrossEntropy { logits, targets, rows },
            Tensor::scalar(loss),
        ))
    }

    /// Mean absolute error against a constant target. Scalar output.
    pub fn l1_loss(&mut self, pred: NodeId, target: Tensor<S>) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "l1_loss shape mismatch");
        let n = S::from_config(pv.numel() as f64);
        let total: S = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        self.push(Op::L1Loss { pred, target }, Tensor::scalar(total / n))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> NodeId {
        assert!(!parts.is_empty());
        match axis {
            Axis::Rows => {
                let cols = self.value(parts[0]).cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let pv = self.value(p);
                    assert_eq!(pv.cols(), cols, "concat rows: col mismatch");
                    rows += pv.rows();
                    data.extend_from_slice(pv.data());
                }
                self.push(Op::Concat(parts.to_vec(), axis), Tensor::from_rows(rows, cols, data))
            }
            Axis::Cols => {
                let rows = self.value(parts[0]).rows();
                let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut data = vec![S::zero(); rows * total_cols];
                let mut col_off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    assert_eq!(pv.rows(), rows, "concat cols: row mismatch");
                    let c = pv.cols();
                    for i in 0..rows {
                        data[i * total_cols + col_off..i * total_cols + col_off + c]
                            .copy_from_slice(&pv.data()[i * c..(i + 1) * c]);
                    }
                    col_off += c;
                }
                self.push(Op::Concat(parts.to_vec(), axis), Tensor::from_rows(rows, total_cols, data))
            }
        }
    }

    pub fn slice(&mut self, x: NodeId, axis: Axis, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let out = match axis {
            Axis::Rows => {
                assert!(start + len <= m, "row slice out of range");
                Tensor::from_rows(len, n, xv.data()[start * n..(start + len) * n].to_vec())
            }
            Axis::Cols => {
                assert!(start + len <= n, "col slice out of range");
                let mut data = Vec::with_capacity(m * len);
                for i in 0..m {
                    data.extend_from_slice(&xv.data()[i * n + start..i * n + start + len]);
                }
                Tensor::from_rows(m, len, data)
            }
        };
        self.push(Op::Slice { x, axis, start, len }, out)
    }

    /// Gradients of `loss` with respect to every parameter leaf, indexed by
    /// the parameter slot passed to [`Graph::param`]. Slots never touched by
    /// this graph come back as `None`; callers treat those as zero.
    pub fn backward(&self, loss: NodeId, n_params: usize) -> Result<Vec<Option<Tensor<S>>>> {
        let loss_val = self.value(loss);
        if !loss_val.is_scalar() {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        let mut out = vec![None; n_params];
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !g.all_finite() {
                return Err(Error::NonFiniteBackward {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            if let Some(p) = self.nodes[i].param {
                assert!(p < n_params, "param slot {p} out of range {n_params}");
                accumulate(&mut out[p], &g);
            }
            self.node_backward(i, &g, &mut grads);
        }
        Ok(out)
    }

    fn node_backward(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                let mut da = vec![S::zero(); m * k];
                matmul_nt(g.data(), bv.data(), &mut da, m, n, k);
                add_into(grads, *a, Tensor::from_rows(m, k, da));
                let mut db = vec![S::zero(); k * n];
                matmul_tn(av.data(), g.data(), &mut db, m, k, n);
                add_into(grads, *b, Tensor::from_rows(k, n, db));
            }
            Op::Transpose(a) => {
                let (m, n) = (g.rows(), g.cols());
                let mut da = vec![S::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[c * m + r] = g.data()[r * n + c];
                    }
                }
                add_into(grads, *a, Tensor::from_rows(n, m, da));
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g.clone());
                let bv = self.value(*b);
                if bv.shape() == g.shape() {
                    add_into(grads, *b, g.clone());
                } else {
                    let cols = bv.numel();
                    let mut db = vec![S::zero(); cols];
                    for (idx, &gv) in g.data().iter().enumerate() {
                        db[idx % cols] = db[idx % cols] + gv;
                    }
                    add_into(grads, *b, Tensor::new(bv.shape().to_vec(), db));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = zip_mul(g.data(), bv.data());
                add_into(grads, *a, Tensor::new(av.shape().to_vec(), da));
                let db = zip_mul(g.data(), av.data());
                add_into(grads, *b, Tensor::new(bv.shape().to_vec(), db));
            }
            Op::Scale(a, c) => {
                let da = g.data().iter().map(|&x| x * *c).collect();
                add_into(grads, *a, Tensor::new(g.shape().to_vec(), da));
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let da = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| gelu_grad(x) * gv)
                    .collect();
                add_into(grads, *a, Tensor::new(av.shape().to_vec(), da));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let da = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x > S::zero() { gv } else { S::zero() })
                    .collect();
                add_into(grads, *a, Tensor::new(av.shape().to_vec(), da));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut da = vec![S::zero(); m * n];
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: S = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for c in 0..n {
                        da[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                add_into(grads, *a, Tensor::from_rows(m, n, da));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (xv, gv) = (self.value(*x), self.value(*gamma));
                let (m, n) = (xv.rows(), xv.cols());
                let nf = S::from_config(n as f64);
                let mut dx = vec![S::zero(); m * n];
                let mut dgamma = vec![S::zero(); n];
                let mut dbeta = vec![S::zero(); n];
                for r in 0..m {
                    let row = &xv.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let (mean, rstd) = moments(row, *eps);
                    let mut mean_dxhat = S::zero();
                    let mut mean_dxhat_xhat = S::zero();
                    for c in 0..n {
                        let xhat = (row[c] - mean) * rstd;
                        let dxhat = gr[c] * gv.data()[c];
                        dgamma[c] = dgamma[c] + gr[c] * xhat;
                        dbeta[c] = dbeta[c] + gr[c];
                        mean_dxhat = mean_dxhat + dxhat;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat;
                    }
                    mean_dxhat = mean_dxhat / nf;
                    mean_dxhat_xhat = mean_dxhat_xhat / nf;
                    for c in 0..n {
                        let xhat = (row[c] - mean) * rstd;
                        let dxhat = gr[c] * gv.data()[c];
                        dx[r * n + c] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                add_into(grads, *x, Tensor::from_rows(m, n, dx));
                add_into(grads, *gamma, Tensor::new(vec![n], dgamma));
                add_into(grads, *beta, Tensor::new(vec![n], dbeta));
            }
            Op::Embedding { table, indices } => {
                let tv = self.value(*table);
                let (v, d) = (tv.rows(), tv.cols());
                let mut dt = vec![S::zero(); v * d];
                for (r, &ix) in indices.iter().enumerate() {
                    let ix = ix as usize;
                    for c in 0..d {
                        dt[ix * d + c] = dt[ix * d + c] + g.data()[r * d + c];
                    }
                }
                add_into(grads, *table, Tensor::from_rows(v, d, dt));
            }
            Op::MaskedFill { x, blocked } => {
                let da = g
                    .data()
                    .iter()
                    .zip(blocked.iter())
                    .map(|(&gv, &b)| if b { S::zero() } else { gv })
                    .collect();
                add_into(grads, *x, Tensor::new(g.shape().to_vec(), da));
            }
            Op::CrossEntropy { logits, targets, rows } => {
                let lv = self.value(*logits);
                let (m, n) = (lv.rows(), lv.cols());
                let selected = rows.iter().filter(|&&b| b).count();
                let scale = g.item() / S::from_config(selected as f64);
                let mut dl = vec![S::zero(); m * n];
                let mut probs = vec![S::zero(); n];
                for r in 0..m {
                    if !rows[r] {
                        continue;
                    }
                    softmax_row(&lv.data()[r * n..(r + 1) * n], &mut probs);
                    let t = targets[r] as usize;
                    for c in 0..n {
                        let indicator = if c == t { S::one() } else { S::zero() };
                        dl[r * n + c] = (probs[c] - indicator) * scale;
                    }
                }
                add_into(grads, *logits, Tensor::from_rows(m, n, dl));
            }
            Op::L1Loss { pred, target } => {
                let pv = self.value(*pred);
                let scale = g.item() / S::from_config(pv.numel() as f64);
                let dp = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        if p > t {
                            scale
                        } else if p < t {
                            -scale
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                add_into(grads, *pred, Tensor::new(pv.shape().to_vec(), dp));
            }
            Op::Concat(parts, axis) => match axis {
                Axis::Rows => {
                    let cols = g.cols();
                    let mut row_off = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let dp = g.data()[row_off * cols..(row_off + rows) * cols].to_vec();
                        add_into(grads, p, Tensor::from_rows(rows, cols, dp));
                        row_off += rows;
                    }
                }
                Axis::Cols => {
                    let rows = g.rows();
                    let total_cols = g.cols();
                    let mut col_off = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(
                                &g.data()[r * total_cols + col_off..r * total_cols + col_off + c],
                            );
                        }
                        add_into(grads, p, Tensor::from_rows(rows, c, dp));
                        col_off += c;
                    }
                }
            },
            Op::Slice { x, axis, start, len } => {
                let xv = self.value(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let mut dx = vec![S::zero(); m * n];
                match axis {
                    Axis::Rows => {
                        dx[*start * n..(*start + *len) * n].copy_from_slice(g.data());
                    }
                    Axis::Cols => {
                        for r in 0..g.rows() {
                            for c in 0..*len {
                                dx[r * n + start + c] = g.data()[r * len + c];
                            }
                        }
                    }
                }
                add_into(grads, *x, Tensor::from_rows(m, n, dx));
            }
        }
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: &Tensor<S>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g.clone()),
    }
}

fn add_into<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: NodeId, g: Tensor<S>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_mul<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

/// c[m,n] += a[m,k] @ b[k,n]
pub(crate) fn matmul_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// c[m,k] += a[m,n] @ b[k,n]^T
pub(crate) fn matmul_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for j in 0..n {
                acc = acc + arow[j] * brow[j];
            }
            crow[p] = crow[p] + acc;
        }
    }
}

/// c[k,n] += a[m,k]^T @ b[m,n]
pub(crate) fn matmul_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let mut max = row[0];
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let mut max = row[0];
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

fn moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::from_config(row.len() as f64);
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    (mean, (var + eps).sqrt().recip())
}

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let half = S::from_config(0.5);
    let c = S::from_config(0.7978845608028654); // sqrt(2/pi)
    let k = S::from_config(0.044715);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::from_config(0.5);
    let c = S::from_config(0.7978845608028654);
    let k = S::from_config(0.044715);
    let three = S::from_config(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (S::one() + three * k * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x = 3 -> df/dx = 6
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(0, Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let grads = g.backward(y, 1).unwrap();
        let gx = grads[0].as_ref().unwrap().item();
        assert!((gx - 6.0).abs() < 1e-12);
    }

    #[test]
    fn two_class_symmetric_cross_entropy() {
        // uniform logits over two classes, target 0 -> grad [-0.5, 0.5]
        let mut g: Graph<f64> = Graph::new();
        let logits = g.param(0, Tensor::from_rows(1, 2, vec![0.0, 0.0]));
        let loss = g
            .cross_entropy(logits, Arc::new(vec![0]), Arc::new(vec![true]))
            .unwrap();
        assert!((g.value(loss).item() - 2.0_f64.ln()).abs() < 1e-12);
        let grads = g.backward(loss, 1).unwrap();
        let gl = grads[0].as_ref().unwrap();
        assert!((gl.data()[0] + 0.5).abs() < 1e-12);
        assert!((gl.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(0, Tensor::from_rows(1, 2, vec![1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y, 1), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn nan_in_backward_names_node() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(0, Tensor::scalar(0.0));
        // The NaN scale factor poisons the gradient flowing into the relu
        // node; the walk reports the first node observed with a non-finite
        // gradient.
        let y = g.relu(x);
        let z = g.scale(y, f64::NAN);
        match g.backward(z, 1) {
            Err(Error::NonFiniteBackward { op, node }) => {
                assert_eq!(op, "relu");
                assert_eq!(node, y.0);
            }
            other => panic!("expected NonFiniteBackward, got {other:?}"),
        }
    }

    #[test]
    fn unreachable_params_are_none() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(0, Tensor::scalar(1.0));
        let _unused = g.param(1, Tensor::scalar(5.0));
        let y = g.mul(x, x);
        let grads = g.backward(y, 2).unwrap();
        assert!(grads[0].is_some());
        assert!(grads[1].is_none());
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut g: Graph<f32> = Graph::new();
            let x = g.param(0, Tensor::from_rows(2, 3, vec![0.1, -0.2, 0.3, 1.0, 2.0, -0.5]));
            let w = g.param(1, Tensor::from_rows(3, 2, vec![0.5, -1.0, 0.25, 0.75, -0.1, 0.2]));
            let h = g.matmul(x, w);
            let a = g.gelu(h);
            let s = g.softmax(a);
            let loss = g
                .cross_entropy(s, Arc::new(vec![0, 1]), Arc::new(vec![true, true]))
                .unwrap();
            g.backward(loss, 2).unwrap()
        };
        let g1 = build();
        let g2 = build();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.as_ref().unwrap().data(), b.as_ref().unwrap().data());
        }
    }
}
