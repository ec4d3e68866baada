//! Reverse-mode differentiation over a closed set of dense operations.
//!
//! A [`Graph`] is an append-only tape. Every operation computes its value
//! eagerly when it is recorded; [`Graph::backward`] then walks the tape in
//! reverse and applies each operation's adjoint rule. Parameters enter the
//! tape through [`Graph::param`] and their gradients are written back into the
//! owning [`ParamStore`] with [`Graph::accumulate_param_grads`].

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Which key positions a query row may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum AttnMask {
    /// Every key is visible.
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Row-major `queries x keys` table; `true` marks a visible key.
    Explicit(Vec<bool>),
}

impl AttnMask {
    #[inline]
    fn allows(&self, i: usize, j: usize, tk: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Causal => j <= i,
            AttnMask::Explicit(m) => m[i * tk + j],
        }
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub(crate) const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Const,
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Tensor),
    Gelu(NodeId),
    Tanh(NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(NodeId, Vec<usize>),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    MeanOf(Vec<NodeId>),
    Sum(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Vec<f64>,
        weights: Vec<f64>,
        normalizer: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Const)
    }

    /// A differentiable input whose gradient is readable via [`Graph::grad`].
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Inserts a parameter, reusing the node if it is already on the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push(store.value(id).clone(), Op::Param);
        self.param_nodes.insert(id, node);
        node
    }

    fn shape2(&self, id: NodeId) -> (usize, usize) {
        let v = self.value(id);
        (v.rows(), v.cols())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, k) = self.shape2(a);
        let (k2, m) = self.shape2(b);
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = vec![0.0; n * m];
        matmul_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            n,
            k,
            m,
        );
        self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shapes");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape");
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (n, m) = self.shape2(a);
        let r = self.value(row);
        assert_eq!(r.len(), m, "add_row width");
        let mut data = self.value(a).data().to_vec();
        for i in 0..n {
            for (x, y) in data[i * m..(i + 1) * m].iter_mut().zip(r.data()) {
                *x += y;
            }
        }
        self.push(Tensor::matrix(n, m, data), Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: NodeId, c: Tensor) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.len(), c.len(), "mul_const shapes");
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape");
        self.push(out, Op::MulConst(a, c))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// Row-wise softmax; masked entries get exactly zero probability.
    pub fn softmax_rows(&mut self, x: NodeId, mask: AttnMask) -> Result<NodeId> {
        let (n, m) = self.shape2(x);
        let v = self.value(x).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            softmax_row_masked(&v[i * m..(i + 1) * m], &mut out[i * m..(i + 1) * m], |j| {
                mask.allows(i, j, m)
            })
            .map_err(|_| Error::FullyMasked(i))?;
        }
        Ok(self.push(Tensor::matrix(n, m, out), Op::SoftmaxRows(x)))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (n, m) = self.shape2(x);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        assert_eq!(g.len(), m);
        assert_eq!(b.len(), m);
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let h = (row[j] - mean) * is;
                xhat[i * m + j] = h;
                out[i * m + j] = g[j] * h + b[j];
            }
        }
        self.push(
            Tensor::matrix(n, m, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Selects rows of `a` by index (repeats allowed).
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let (n, m) = self.shape2(a);
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * m);
        for &r in idx {
            assert!(r < n, "gather_rows index {r} out of {n}");
            out.extend_from_slice(&v[r * m..(r + 1) * m]);
        }
        self.push(
            Tensor::matrix(idx.len(), m, out),
            Op::GatherRows(a, idx.to_vec()),
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let (n, m) = self.shape2(a);
        assert!(start < end && end <= m);
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            out.extend_from_slice(&v[i * m + start..i * m + end]);
        }
        self.push(
            Tensor::matrix(n, end - start, out),
            Op::SliceCols(a, start, end),
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let m = self.shape2(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape2(p);
            assert_eq!(c, m, "concat_rows widths");
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::matrix(rows, m, out), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let n = self.shape2(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.shape2(p);
                assert_eq!(r, n, "concat_cols heights");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p).data();
            for i in 0..n {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.push(
            Tensor::matrix(n, total, out),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    /// Column means, producing a single row.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (n, m) = self.shape2(a);
        let v = self.value(a).data();
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, x) in out.iter_mut().zip(&v[i * m..(i + 1) * m]) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        self.push(Tensor::row_vector(out), Op::MeanRows(a))
    }

    /// Elementwise mean of same-shape nodes: the sum in argument order,
    /// divided by the count.
    pub fn mean_of(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "mean_of needs at least one input");
        let shape = self.value(parts[0]).shape().to_vec();
        let mut acc = self.value(parts[0]).data().to_vec();
        for &p in &parts[1..] {
            let v = self.value(p);
            assert_eq!(v.shape(), &shape[..], "mean_of shapes");
            acc.iter_mut().zip(v.data()).for_each(|(a, x)| *a += x);
        }
        let n = parts.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let out = Tensor::new(shape, acc).expect("shape");
        self.push(out, Op::MeanOf(parts.to_vec()))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Scaled dot-product attention split into `heads` column groups.
    ///
    /// `q` is `tq x d`, `k` is `tk x d` and `v` is `tk x dv`; both `d` and
    /// `dv` must be divisible by `heads`. Each head uses the scale
    /// `1 / sqrt(d / heads)`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: AttnMask,
    ) -> Result<NodeId> {
        let (tq, d) = self.shape2(q);
        let (tk, dk) = self.shape2(k);
        let (tv, dv) = self.shape2(v);
        if d != dk || tk != tv || d % heads != 0 || dv % heads != 0 {
            return Err(Error::Shape(format!(
                "attention q {tq}x{d}, k {tk}x{dk}, v {tv}x{dv}, heads {heads}"
            )));
        }
        if let AttnMask::Explicit(m) = &mask {
            if m.len() != tq * tk {
                return Err(Error::Shape(format!(
                    "mask has {} entries, scores have {}",
                    m.len(),
                    tq * tk
                )));
            }
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            (tq, tk, d, dv, heads),
            &mask,
        )?;
        Ok(self.push(
            Tensor::matrix(tq, dv, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Summed token negative log-likelihood of `targets` under row-wise
    /// softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (n, m) = self.shape2(logits);
        if n != targets.len() {
            return Err(Error::LengthMismatch(format!(
                "{n} logit rows for {} targets",
                targets.len()
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * m];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= m {
                return Err(Error::TokenOutOfRange(t));
            }
            let row = &lv[i * m..(i + 1) * m];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            total -= row[t] - log_z;
            for j in 0..m {
                probs[i * m + j] = (row[j] - log_z).exp();
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("cross entropy".into()));
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Class-weighted binary cross-entropy on logits, summed over every
    /// entry and divided by `normalizer`. Probabilities are clamped at
    /// `1e-12` before the logarithm.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: &[f64],
        weights: &[f64],
        normalizer: f64,
    ) -> Result<NodeId> {
        let (n, m) = self.shape2(logits);
        if targets.len() != n * m || weights.len() != m {
            return Err(Error::LengthMismatch(format!(
                "bce on {n}x{m} logits with {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for i in 0..n {
            for k in 0..m {
                total += weights[k] * bce_term(lv[i * m + k], targets[i * m + k]);
            }
        }
        total /= normalizer;
        if !total.is_finite() {
            return Err(Error::NonFinite("binary cross entropy".into()));
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                normalizer,
            },
        ))
    }

    /// Back-propagates from a scalar node. Gradients from earlier calls are
    /// discarded.
    pub fn backward(&mut self, output: NodeId) {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
    }

    /// Adds the gradients of every parameter node into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&pid, &node) in &self.param_nodes {
            if let Some(g) = self.grad(node) {
                store.accumulate_grad(pid, g);
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Const | Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.shape2(*a);
                let m = self.value(*b).cols();
                let mut ga = vec![0.0; n * k];
                matmul_nt(g, self.value(*b).data(), &mut ga, n, m, k);
                add_into(grads, *a, &ga);
                let mut gb = vec![0.0; k * m];
                matmul_tn(self.value(*a).data(), g, &mut gb, n, k, m);
                add_into(grads, *b, &gb);
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g);
                add_into(grads, *b, g);
            }
            Op::AddRow(a, row) => {
                add_into(grads, *a, g);
                let m = self.value(*row).len();
                let mut gr = vec![0.0; m];
                for chunk in g.chunks(m) {
                    for (o, x) in gr.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                add_into(grads, *row, &gr);
            }
            Op::Scale(a, f) => {
                let ga: Vec<f64> = g.iter().map(|x| x * f).collect();
                add_into(grads, *a, &ga);
            }
            Op::MulConst(a, c) => {
                let ga: Vec<f64> = g.iter().zip(c.data()).map(|(x, y)| x * y).collect();
                add_into(grads, *a, &ga);
            }
            Op::Gelu(a) => {
                let xs = self.value(*a).data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(xs)
                    .map(|(gv, &x)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                add_into(grads, *a, &ga);
            }
            Op::Tanh(a) => {
                let ys = node.value.data();
                let ga: Vec<f64> = g.iter().zip(ys).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                add_into(grads, *a, &ga);
            }
            Op::Transpose(a) => {
                let (n, m) = (node.value.rows(), node.value.cols());
                let gt = Tensor::matrix(n, m, g.to_vec()).transpose();
                add_into(grads, *a, gt.data());
            }
            Op::SoftmaxRows(x) => {
                let (n, m) = (node.value.rows(), node.value.cols());
                let p = node.value.data();
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    let pr = &p[i * m..(i + 1) * m];
                    let gr = &g[i * m..(i + 1) * m];
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        gx[i * m + j] = pr[j] * (gr[j] - dot);
                    }
                }
                add_into(grads, *x, &gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, m) = (node.value.rows(), node.value.cols());
                let gv = self.value(*gain).data();
                let mut gx = vec![0.0; n * m];
                let mut ggain = vec![0.0; m];
                let mut gbias = vec![0.0; m];
                let mut dxhat = vec![0.0; m];
                for i in 0..n {
                    let gr = &g[i * m..(i + 1) * m];
                    let hr = &xhat[i * m..(i + 1) * m];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..m {
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                        sum_d += dxhat[j];
                        sum_dh += dxhat[j] * hr[j];
                    }
                    let scale = inv_std[i] / m as f64;
                    for j in 0..m {
                        gx[i * m + j] = scale * (m as f64 * dxhat[j] - sum_d - hr[j] * sum_dh);
                    }
                }
                add_into(grads, *x, &gx);
                add_into(grads, *gain, &ggain);
                add_into(grads, *bias, &gbias);
            }
            Op::GatherRows(a, idx) => {
                let (n, m) = self.shape2(*a);
                let mut ga = vec![0.0; n * m];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..m {
                        ga[src * m + j] += g[r * m + j];
                    }
                }
                add_into(grads, *a, &ga);
            }
            Op::SliceCols(a, start, end) => {
                let (n, m) = self.shape2(*a);
                let w = end - start;
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    ga[i * m + start..i * m + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                add_into(grads, *a, &ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    add_into(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = (node.value.rows(), node.value.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = vec![0.0; n * w];
                    for i in 0..n {
                        gp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    add_into(grads, p, &gp);
                    offset += w;
                }
            }
            Op::MeanRows(a) => {
                let (n, m) = self.shape2(*a);
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        ga[i * m + j] = g[j] / n as f64;
                    }
                }
                add_into(grads, *a, &ga);
            }
            Op::MeanOf(parts) => {
                let n = parts.len() as f64;
                let gp: Vec<f64> = g.iter().map(|x| x / n).collect();
                for p in parts {
                    add_into(grads, *p, &gp);
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                add_into(grads, *a, &vec![g[0]; n]);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (tq, d) = self.shape2(*q);
                let (tk, dv) = self.shape2(*v);
                let (gq, gk, gv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    (tq, tk, d, dv, *heads),
                );
                add_into(grads, *q, &gq);
                add_into(grads, *k, &gk);
                add_into(grads, *v, &gv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let m = self.value(*logits).cols();
                let mut gl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * m + t] -= 1.0;
                }
                gl.iter_mut().for_each(|x| *x *= g[0]);
                add_into(grads, *logits, &gl);
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
                normalizer,
            } => {
                let lv = self.value(*logits).data();
                let m = weights.len();
                let gl: Vec<f64> = lv
                    .iter()
                    .zip(targets)
                    .enumerate()
                    .map(|(i, (&x, &t))| g[0] * weights[i % m] * bce_term_grad(x, t) / normalizer)
                    .collect();
                add_into(grads, *logits, &gl);
            }
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// `-[t ln(sigma(x)) + (1 - t) ln(1 - sigma(x))]` with both probabilities
/// clamped at [`LOG_CLAMP`].
pub(crate) fn bce_term(x: f64, t: f64) -> f64 {
    let p = super::tensor::sigmoid(x);
    let q = super::tensor::sigmoid(-x);
    -(t * p.max(LOG_CLAMP).ln() + (1.0 - t) * q.max(LOG_CLAMP).ln())
}

fn bce_term_grad(x: f64, t: f64) -> f64 {
    let p = super::tensor::sigmoid(x);
    let q = super::tensor::sigmoid(-x);
    // d/dx ln(sigma(x)) = sigma(-x); zero where the clamp is active.
    let d_pos = if p > LOG_CLAMP { q } else { 0.0 };
    let d_neg = if q > LOG_CLAMP { -p } else { 0.0 };
    -(t * d_pos + (1.0 - t) * d_neg)
}

fn softmax_row_masked(
    row: &[f64],
    out: &mut [f64],
    allowed: impl Fn(usize) -> bool,
) -> std::result::Result<(), ()> {
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for (j, &x) in row.iter().enumerate() {
        if allowed(j) {
            any = true;
            max = max.max(x);
        }
    }
    if !any {
        return Err(());
    }
    let mut sum = 0.0;
    for (j, &x) in row.iter().enumerate() {
        if allowed(j) {
            let e = (x - max).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = 0.0;
        }
    }
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(())
}

type AttnDims = (usize, usize, usize, usize, usize);

pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    (tq, tk, d, dv, heads): AttnDims,
    mask: &AttnMask,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dh = d / heads;
    let dvh = dv / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; tq * dv];
    let mut probs = vec![0.0; heads * tq * tk];
    let mut scores = vec![0.0; tk];
    for h in 0..heads {
        for i in 0..tq {
            let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..tk {
                let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
                scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            softmax_row_masked(&scores, p, |j| mask.allows(i, j, tk))
                .map_err(|_| Error::FullyMasked(i))?;
            let o = &mut out[i * dv + h * dvh..i * dv + (h + 1) * dvh];
            for (j, &pj) in p.iter().enumerate() {
                if pj == 0.0 {
                    continue;
                }
                let vj = &v[j * dv + h * dvh..j * dv + (h + 1) * dvh];
                for (oc, vc) in o.iter_mut().zip(vj) {
                    *oc += pj * vc;
                }
            }
        }
    }
    Ok((out, probs))
}

fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    (tq, tk, d, dv, heads): AttnDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let dvh = dv / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; tq * d];
    let mut gk = vec![0.0; tk * d];
    let mut gv = vec![0.0; tk * dv];
    let mut dp = vec![0.0; tk];
    for h in 0..heads {
        for i in 0..tq {
            let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let gi = &g[i * dv + h * dvh..i * dv + (h + 1) * dvh];
            let mut dot = 0.0;
            for j in 0..tk {
                let vj = &v[j * dv + h * dvh..j * dv + (h + 1) * dvh];
                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += p[j] * dp[j];
                if p[j] != 0.0 {
                    let gvj = &mut gv[j * dv + h * dvh..j * dv + (h + 1) * dvh];
                    for (o, x) in gvj.iter_mut().zip(gi) {
                        *o += p[j] * x;
                    }
                }
            }
            for j in 0..tk {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    gq[i * d + h * dh + c] += ds * k[j * d + h * dh + c];
                    gk[j * d + h * dh + c] += ds * q[i * d + h * dh + c];
                }
            }
        }
    }
    (gq, gk, gv)
}
