//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of a forward pass together with the
//! values it produced. [`Graph::backward`] then walks the tape in reverse and
//! accumulates the gradient of a scalar output with respect to every node
//! that depends on a parameter. Constant inputs never receive gradients, so
//! products with fixed data skip the unneeded half of the backward matmul.
//!
//! The operation set is exactly what the rendering model needs: dense
//! layers, normalisation, activations, grouped self-attention and the
//! grouped softmax pooling used by the aggregation stages.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Scalar, Tensor};

/// Logit added to masked entries before a softmax.
pub const MASK_LOGIT: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Gelu { x: Var, tanh: Vec<T> },
    Relu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, scale: Var, shift: Var, xhat: Vec<T>, rstd: Vec<T> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GroupAttention { q: Var, k: Var, v: Var, group: usize, probs: Vec<T> },
    GroupSoftmax { logits: Var, group: usize },
    GroupWeightedSum { weights: Var, values: Var, group: usize },
    AddGroupBroadcast { x: Var, y: Var, group: usize },
    MeanSquaredError { pred: Var, target: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant data; never differentiated.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Differentiable leaf tagged with a parameter slot.
    pub fn param(&mut self, slot: usize, value: &Tensor<T>) -> Var {
        self.push(value.clone(), Op::Param(slot), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let r = self.req(a) || self.req(b);
        self.push(value, Op::MatMul(a, b), r)
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.rows(), 1);
        assert_eq!(xv.cols(), bv.cols(), "bias width");
        let mut value = xv.clone();
        let cols = value.cols();
        for row in value.data_mut().chunks_mut(cols) {
            for (a, &b) in row.iter_mut().zip(bv.data()) {
                *a += b;
            }
        }
        let r = self.req(x) || self.req(bias);
        self.push(value, Op::AddBias(x, bias), r)
    }

    /// `x * w + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let r = self.req(a) || self.req(b);
        self.push(value, Op::Add(a, b), r)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let r = self.req(a);
        self.push(value, Op::Scale(a, s), r)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let xv = self.value(a);
        let tanh: Vec<T> = xv.data().iter().map(|&x| gelu_tanh(x)).collect();
        let half = T::lit(0.5);
        let data = xv.data().iter().zip(&tanh).map(|(&x, &t)| half * x * (T::one() + t)).collect();
        let value = Tensor::from_vec(xv.rows(), xv.cols(), data);
        let r = self.req(a);
        self.push(value, Op::Gelu { x: a, tanh }, r)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let r = self.req(a);
        self.push(value, Op::Relu(a), r)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let r = self.req(a);
        self.push(value, Op::Sigmoid(a), r)
    }

    /// Normalises each row to zero mean and unit variance, then applies a
    /// per-column scale and shift.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (sv, bv) = (self.value(scale).data(), self.value(shift).data());
        assert_eq!(sv.len(), cols);
        assert_eq!(bv.len(), cols);
        let n = T::from_usize(cols).unwrap();
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            rstd[r] = inv;
            let xh = &mut xhat[r * cols..(r + 1) * cols];
            let o = out.row_mut(r);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xh[c] = h;
                o[c] = h * sv[c] + bv[c];
            }
        }
        let r = self.req(x) || self.req(scale) || self.req(shift);
        self.push(out, Op::LayerNorm { x, scale, shift, xhat, rstd }, r)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row count");
            let w = pv.cols();
            for r in 0..rows {
                out.row_mut(r)[offset..offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        let r = parts.iter().any(|&p| self.req(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), r)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column count");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let r = parts.iter().any(|&p| self.req(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), r)
    }

    /// `out[i] = a[index[i]]`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            data.extend_from_slice(av.row(i));
        }
        let value = Tensor::from_vec(index.len(), cols, data);
        let r = self.req(a);
        self.push(value, Op::GatherRows(a, index), r)
    }

    /// Single-head scaled dot-product self-attention within groups of
    /// `group` consecutive rows. Keys flagged false in `key_mask` get
    /// [`MASK_LOGIT`]; every group must keep at least one key.
    pub fn group_attention(&mut self, q: Var, k: Var, v: Var, group: usize, key_mask: &[bool]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        assert_eq!(kv.shape(), (rows, d));
        assert_eq!(vv.shape(), (rows, d));
        assert_eq!(key_mask.len(), rows);
        assert_eq!(rows % group, 0);
        let groups = rows / group;
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();
        let mask_logit = T::lit(MASK_LOGIT);
        let mut probs = vec![T::zero(); groups * group * group];
        let mut out = Tensor::zeros(rows, d);
        for g in 0..groups {
            let base = g * group;
            for i in 0..group {
                let qi = qv.row(base + i);
                let p = &mut probs[(g * group + i) * group..(g * group + i + 1) * group];
                let mut max = T::neg_infinity();
                for j in 0..group {
                    let kj = kv.row(base + j);
                    let mut s = dot(qi, kj) * scale;
                    if !key_mask[base + j] {
                        s = s + mask_logit;
                    }
                    p[j] = s;
                    max = max.max(s);
                }
                let mut total = T::zero();
                for x in p.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in p.iter_mut() {
                    *x = *x / total;
                }
                let o = out.row_mut(base + i);
                for j in 0..group {
                    let w = p[j];
                    if w != T::zero() {
                        axpy(w, vv.row(base + j), o);
                    }
                }
            }
        }
        let r = self.req(q) || self.req(k) || self.req(v);
        self.push(out, Op::GroupAttention { q, k, v, group, probs }, r)
    }

    /// Softmax over each group of `group` rows of a single-column tensor.
    /// Masked rows get exactly zero weight; a fully masked group yields all
    /// zeros.
    pub fn group_softmax(&mut self, logits: Var, group: usize, mask: &[bool]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.cols(), 1);
        let rows = lv.rows();
        assert_eq!(mask.len(), rows);
        assert_eq!(rows % group, 0);
        let mask_logit = T::lit(MASK_LOGIT);
        let mut out = Tensor::zeros(rows, 1);
        for g in 0..rows / group {
            let range = g * group..(g + 1) * group;
            if !mask[range.clone()].iter().any(|&m| m) {
                continue;
            }
            let src = &lv.data()[range.clone()];
            let dst = &mut out.data_mut()[range.clone()];
            let mut max = T::neg_infinity();
            for (i, (&l, d)) in src.iter().zip(dst.iter_mut()).enumerate() {
                *d = if mask[g * group + i] { l } else { l + mask_logit };
                max = max.max(*d);
            }
            let mut total = T::zero();
            for d in dst.iter_mut() {
                *d = (*d - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        let r = self.req(logits);
        self.push(out, Op::GroupSoftmax { logits, group }, r)
    }

    /// `out[g] = sum_i weights[g*S + i] * values[g*S + i]`.
    pub fn group_weighted_sum(&mut self, weights: Var, values: Var, group: usize) -> Var {
        let (wv, vv) = (self.value(weights), self.value(values));
        assert_eq!(wv.cols(), 1);
        assert_eq!(wv.rows(), vv.rows());
        assert_eq!(vv.rows() % group, 0);
        let groups = vv.rows() / group;
        let mut out = Tensor::zeros(groups, vv.cols());
        for g in 0..groups {
            let o = out.row_mut(g);
            for i in 0..group {
                let w = wv.data()[g * group + i];
                if w != T::zero() {
                    axpy(w, vv.row(g * group + i), o);
                }
            }
        }
        let r = self.req(weights) || self.req(values);
        self.push(out, Op::GroupWeightedSum { weights, values, group }, r)
    }

    /// `out[r] = x[r] + y[r / group]`.
    pub fn add_group_broadcast(&mut self, x: Var, y: Var, group: usize) -> Var {
        let (xv, yv) = (self.value(x), self.value(y));
        assert_eq!(xv.cols(), yv.cols());
        assert_eq!(xv.rows(), yv.rows() * group);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let yr = yv.row(r / group);
            for (a, &b) in out.row_mut(r).iter_mut().zip(yr) {
                *a += b;
            }
        }
        let r = self.req(x) || self.req(y);
        self.push(out, Op::AddGroupBroadcast { x, y, group }, r)
    }

    /// Mean over all entries of `(pred - target)^2`, as a `1 x 1` tensor.
    pub fn mean_squared_error(&mut self, pred: Var, target: Tensor<T>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse shapes");
        let n = T::from_usize(pv.len().max(1)).unwrap();
        let total: T = pv.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum();
        let r = self.req(pred);
        self.push(Tensor::filled(1, 1, total / n), Op::MeanSquaredError { pred, target }, r)
    }

    /// Gradient of a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Grads<T> {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        self.backward_with_seed(output, Tensor::filled(1, 1, T::one()))
    }

    /// Vector-Jacobian product of `output` with `seed`.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor<T>) -> Grads<T> {
        assert_eq!(self.value(output).shape(), seed.shape());
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(slot) => Some((slot, Var(i))),
                _ => None,
            })
            .collect();
        Grads { nodes: grads, params }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = av.shape();
                let n = bv.cols();
                if self.req(a) {
                    let ga = slot(grads, a, m, k);
                    T::gemm(m, n, k, g.data(), false, bv.data(), true, ga.data_mut(), T::one());
                }
                if self.req(b) {
                    let gb = slot(grads, b, k, n);
                    T::gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), T::one());
                }
            }
            &Op::AddBias(x, b) => {
                if self.req(x) {
                    accumulate(grads, x, g);
                }
                if self.req(b) {
                    let cols = g.cols();
                    let gb = slot(grads, b, 1, cols);
                    for row in g.data().chunks(cols) {
                        for (a, &d) in gb.data_mut().iter_mut().zip(row) {
                            *a += d;
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for p in [a, b] {
                    if self.req(p) {
                        accumulate(grads, p, g);
                    }
                }
            }
            &Op::Scale(a, s) => {
                let ga = slot(grads, a, g.rows(), g.cols());
                for (d, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                    *d += x * s;
                }
            }
            Op::Gelu { x, tanh } => {
                let xv = self.value(*x);
                let ga = slot(grads, *x, g.rows(), g.cols());
                let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
                let (half, three) = (T::lit(0.5), T::lit(3.0));
                for (((d, &x), &t), &up) in ga.data_mut().iter_mut().zip(xv.data()).zip(tanh).zip(g.data()) {
                    let dinner = c * (T::one() + three * a * x * x);
                    *d += up * (half * (T::one() + t) + half * x * (T::one() - t * t) * dinner);
                }
            }
            &Op::Relu(a) => {
                let xv = self.value(a);
                let ga = slot(grads, a, g.rows(), g.cols());
                for ((d, &x), &up) in ga.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                    if x > T::zero() {
                        *d += up;
                    }
                }
            }
            &Op::Sigmoid(a) => {
                let y = &node.value;
                let ga = slot(grads, a, g.rows(), g.cols());
                for ((d, &s), &up) in ga.data_mut().iter_mut().zip(y.data()).zip(g.data()) {
                    *d += up * s * (T::one() - s);
                }
            }
            Op::LayerNorm { x, scale, shift, xhat, rstd } => {
                let (rows, cols) = g.shape();
                let sv = self.value(*scale).data().to_vec();
                if self.req(*scale) {
                    let gs = slot(grads, *scale, 1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gs.data_mut()[c] += g.get(r, c) * xhat[r * cols + c];
                        }
                    }
                }
                if self.req(*shift) {
                    let gb = slot(grads, *shift, 1, cols);
                    for r in 0..rows {
                        for (a, &d) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *a += d;
                        }
                    }
                }
                if self.req(*x) {
                    let n = T::from_usize(cols).unwrap();
                    let gx = slot(grads, *x, rows, cols);
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..cols {
                            dxhat[c] = g.get(r, c) * sv[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xh[c];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            out[c] += rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.req(p) {
                        let gp = slot(grads, p, g.rows(), w);
                        for r in 0..g.rows() {
                            for (a, &d) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *a += d;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (h, w) = self.value(p).shape();
                    if self.req(p) {
                        let gp = slot(grads, p, h, w);
                        for (a, &d) in gp.data_mut().iter_mut().zip(&g.data()[offset * w..(offset + h) * w]) {
                            *a += d;
                        }
                    }
                    offset += h;
                }
            }
            Op::GatherRows(a, index) => {
                let (h, w) = self.value(*a).shape();
                let ga = slot(grads, *a, h, w);
                for (r, &i) in index.iter().enumerate() {
                    for (d, &x) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
            }
            Op::GroupAttention { q, k, v, group, probs } => {
                self.attention_backward(*q, *k, *v, *group, probs, g, grads);
            }
            &Op::GroupSoftmax { logits, group } => {
                let w = &node.value;
                let gl = slot(grads, logits, w.rows(), 1);
                for gi in 0..w.rows() / group {
                    let range = gi * group..(gi + 1) * group;
                    let ws = &w.data()[range.clone()];
                    let gs = &g.data()[range.clone()];
                    let inner: T = ws.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for (i, d) in gl.data_mut()[range].iter_mut().enumerate() {
                        *d += ws[i] * (gs[i] - inner);
                    }
                }
            }
            &Op::GroupWeightedSum { weights, values, group } => {
                let (wv, vv) = (self.value(weights), self.value(values));
                let (rows, d) = vv.shape();
                if self.req(weights) {
                    let gw = slot(grads, weights, rows, 1);
                    for r in 0..rows {
                        gw.data_mut()[r] += dot(vv.row(r), g.row(r / group));
                    }
                }
                if self.req(values) {
                    let gv = slot(grads, values, rows, d);
                    for r in 0..rows {
                        let w = wv.data()[r];
                        if w != T::zero() {
                            axpy(w, g.row(r / group), gv.row_mut(r));
                        }
                    }
                }
            }
            &Op::AddGroupBroadcast { x, y, group } => {
                if self.req(x) {
                    accumulate(grads, x, g);
                }
                if self.req(y) {
                    let (h, w) = self.value(y).shape();
                    let gy = slot(grads, y, h, w);
                    for r in 0..g.rows() {
                        for (a, &d) in gy.row_mut(r / group).iter_mut().zip(g.row(r)) {
                            *a += d;
                        }
                    }
                }
            }
            Op::MeanSquaredError { pred, target } => {
                let pv = self.value(*pred);
                let up = g.data()[0];
                let n = T::from_usize(pv.len().max(1)).unwrap();
                let factor = up * T::lit(2.0) / n;
                let gp = slot(grads, *pred, pv.rows(), pv.cols());
                for ((d, &p), &t) in gp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                    *d += factor * (p - t);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();
        let mut dq = Tensor::zeros(rows, d);
        let mut dk = Tensor::zeros(rows, d);
        let mut dv = Tensor::zeros(rows, d);
        let mut ds = vec![T::zero(); group];
        for gi in 0..rows / group {
            let base = gi * group;
            for i in 0..group {
                let p = &probs[(base + i) * group..(base + i + 1) * group];
                let go = g.row(base + i);
                // dP_ij = dO_i . V_j
                let mut inner = T::zero();
                for j in 0..group {
                    let dp = dot(go, vv.row(base + j));
                    ds[j] = dp;
                    inner += dp * p[j];
                }
                for j in 0..group {
                    if p[j] == T::zero() {
                        continue;
                    }
                    axpy(p[j], go, dv.row_mut(base + j));
                    let s = p[j] * (ds[j] - inner) * scale;
                    if s != T::zero() {
                        axpy(s, kv.row(base + j), dq.row_mut(base + i));
                        axpy(s, qv.row(base + i), dk.row_mut(base + j));
                    }
                }
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if self.req(var) {
                accumulate(grads, var, &grad);
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient with respect to a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Per-slot parameter gradients, summed over every use of the slot.
    pub fn params(&self, slots: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..slots).map(|_| None).collect();
        for &(slot, var) in &self.params {
            if let Some(g) = self.wrt(var) {
                match &mut out[slot] {
                    Some(acc) => acc.add_assign(g),
                    none => *none = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], v: Var, rows: usize, cols: usize) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: &Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(g),
        none => *none = Some(g.clone()),
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &s) in y.iter_mut().zip(x) {
        *d += alpha * s;
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + gelu_tanh(x))
}

/// `tanh(sqrt(2/pi) (x + 0.044715 x^3))`, through `exp`, which is markedly
/// cheaper than the libm `tanh`.
fn gelu_tanh<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let two = T::lit(2.0);
    T::one() - two / ((two * inner).exp() + T::one())
}
