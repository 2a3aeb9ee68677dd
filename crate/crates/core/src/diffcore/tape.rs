//! Reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its value and, when tracking is
//! enabled, enough to run its backward rule. Nodes only reference earlier
//! nodes, so the tape order is a topological order and backward is a single
//! reverse sweep.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::attention::{self, AttentionPlan};
use super::kernels::{self, sigmoid, softmax_in_place};
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    RowScale(Var, Var),
    ColScale(Var, Var),
    Outer(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Standardize {
        x: Var,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: usize,
        probs: Vec<T>,
        active: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        plan: AttentionPlan,
        probs: Vec<T>,
    },
    Modulate {
        shared: Var,
        mult: Vec<(Var, Var)>,
        add: Vec<(Var, Var)>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
}

/// Gradient tape. Parameters are read from the store it borrows; backward
/// returns their gradients rather than writing them, so a store can be
/// shared by several tapes at once.
pub struct Tape<'p, T> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    tracking: bool,
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// Tracking tape without parameter access.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            tracking: true,
        }
    }

    /// Tracking tape reading parameters from `store`.
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(store),
            tracking: true,
        }
    }

    /// Non-tracking tape for inference. Nothing is saved for backward and
    /// factorized layers take their gated fast path.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(store),
            tracking: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn store(&self) -> Result<&'p ParamStore<T>> {
        self.params
            .ok_or_else(|| Error::invalid("tape has no parameter store"))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let op = if self.tracking { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let value = self.store()?.get(id).shared_value();
        let op = if self.tracking { Op::Param(id) } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv).map_err(|_| Error::shape("matmul", av.shape(), bv.shape()))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), name, f)?;
        self.push(name, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push("scale", out, Op::Scale(a, c))
    }

    /// `x[m×n] ⊙ v[n]` broadcast over rows.
    pub fn row_scale(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        let (_, n) = xv.dims2("row_scale").map_err(|_| Error::shape("row_scale", xv.shape(), vv.shape()))?;
        if vv.shape() != [n] {
            return Err(Error::shape("row_scale", xv.shape(), vv.shape()));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &s) in row.iter_mut().zip(vv.data()) {
                *o *= s;
            }
        }
        let out = Tensor::from_raw(xv.shape().to_vec(), out);
        self.push("row_scale", out, Op::RowScale(x, v))
    }

    /// `x[m×n] ⊙ v[m]` broadcast over columns.
    pub fn col_scale(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        let (m, n) = xv.dims2("col_scale").map_err(|_| Error::shape("col_scale", xv.shape(), vv.shape()))?;
        if vv.shape() != [m] {
            return Err(Error::shape("col_scale", xv.shape(), vv.shape()));
        }
        let mut out = xv.data().to_vec();
        for (row, &s) in out.chunks_exact_mut(n).zip(vv.data()) {
            row.iter_mut().for_each(|o| *o *= s);
        }
        let out = Tensor::from_raw(xv.shape().to_vec(), out);
        self.push("col_scale", out, Op::ColScale(x, v))
    }

    /// `u[m] vᵀ[n]`.
    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        let (uv, vv) = (self.value(u), self.value(v));
        if uv.rank() != 1 || vv.rank() != 1 {
            return Err(Error::shape("outer", uv.shape(), vv.shape()));
        }
        let (m, n) = (uv.len(), vv.len());
        let mut out = Vec::with_capacity(m * n);
        for &a in uv.data() {
            out.extend(vv.data().iter().map(|&b| a * b));
        }
        self.push("outer", Tensor::from_raw(vec![m, n], out), Op::Outer(u, v))
    }

    /// `x + 1 bᵀ`: adds a bias vector to every row, built from `outer`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        if self.value(x).rank() != 2 || self.value(b).shape() != [self.value(x).cols()] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let ones = self.constant(Tensor::ones(&[rows]))?;
        let spread = self.outer(ones, b)?;
        self.add(x, spread)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.tanh());
        self.push("tanh", out, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", out, Op::Relu(x))
    }

    /// Softmax over the last dimension, with per-row max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = xv.data().to_vec();
        out.chunks_exact_mut(n).for_each(softmax_in_place);
        let out = Tensor::from_raw(xv.shape().to_vec(), out);
        self.push("softmax", out, Op::Softmax(x))
    }

    /// Concatenates along the last dimension. Inputs share rank and, for
    /// matrices, row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let rank = self.value(first).rank();
        let rows = self.value(first).rows();
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != rank || pv.rows() != rows || rank > 2 {
                return Err(Error::shape("concat_cols", self.shape(first), pv.shape()));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        self.push("concat_cols", Tensor::from_raw(shape, out), Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let cols = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(first), pv.shape()));
            }
            out.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push("concat_rows", Tensor::from_raw(vec![rows, cols], out), Op::ConcatRows(parts.to_vec()))
    }

    /// Copies columns `start..end` of the last dimension.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if start >= end || end > n || xv.rank() > 2 {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, end]));
        }
        let mut out = Vec::with_capacity(xv.rows() * (end - start));
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let shape = if xv.rank() == 1 { vec![end - start] } else { vec![xv.rows(), end - start] };
        self.push("slice_cols", Tensor::from_raw(shape, out), Op::SliceCols(x, start))
    }

    /// Copies rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || start >= end || end > xv.rows() {
            return Err(Error::shape("slice_rows", xv.shape(), &[start, end]));
        }
        let n = xv.cols();
        let out = xv.data()[start * n..end * n].to_vec();
        self.push("slice_rows", Tensor::from_raw(vec![end - start, n], out), Op::SliceRows(x, start))
    }

    /// Row lookup; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || indices.is_empty() {
            return Err(Error::shape("gather_rows", xv.shape(), &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::shape("gather_rows", xv.shape(), &[bad]));
        }
        let n = xv.cols();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::from_raw(vec![indices.len(), n], out);
        self.push("gather_rows", t, Op::GatherRows(x, indices.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.sum() / T::lit(xv.len() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x))
    }

    /// Per-row `(x − mean) / sqrt(var + eps)` over the last dimension.
    pub fn standardize(&mut self, x: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let inv_n = T::one() / T::lit(n as f64);
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in out.chunks_exact_mut(n) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let inv = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let t = Tensor::from_raw(xv.shape().to_vec(), out);
        self.push("standardize", t, Op::Standardize { x, inv_std })
    }

    /// Mean over non-pad rows of `−log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = lv.dims2("cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        let mut active = 0usize;
        for (row, &t) in probs.chunks_exact_mut(vocab).zip(targets) {
            if t == pad {
                continue;
            }
            if t >= vocab {
                return Err(Error::UnknownToken { token: t, vocab });
            }
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[t];
            softmax_in_place(row);
            active += 1;
        }
        if active == 0 {
            return Err(Error::AllPadded);
        }
        let loss = total / T::lit(active as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            pad,
            probs,
            active,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op)
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, plan: &AttentionPlan) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (qr, d) = qv.dims2("attention")?;
        let (kr, dk) = kv.dims2("attention")?;
        if heads == 0 || d % heads != 0 || dk != d || kv.shape() != vv.shape() {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        if qr != plan.q_rows() || kr != plan.k_rows() {
            return Err(Error::shape("attention", &[qr, kr], &[plan.q_rows(), plan.k_rows()]));
        }
        let res = attention::forward(qv.data(), kv.data(), vv.data(), d, heads, plan);
        let out = Tensor::from_raw(vec![qr, d], res.out);
        let probs = if self.tracking { res.probs } else { Vec::new() };
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            plan: plan.clone(),
            probs,
        };
        self.push("attention", out, op)
    }

    /// `W ⊙ (Σᵢ rᵢ sᵢᵀ) + Σᵢ aᵢ bᵢᵀ` in one pass, for `mult = [(rᵢ, sᵢ)]` and
    /// `add = [(aᵢ, bᵢ)]` with `r, a ∈ R^{rows}` and `s, b ∈ R^{cols}`.
    pub fn modulate(&mut self, shared: Var, mult: &[(Var, Var)], add: &[(Var, Var)]) -> Result<Var> {
        let wv = self.value(shared);
        let (m, n) = wv.dims2("modulate")?;
        if mult.is_empty() {
            return Err(Error::invalid("modulate needs at least one multiplicative pair"));
        }
        for &(r, s) in mult.iter().chain(add) {
            let (rv, sv) = (self.value(r), self.value(s));
            if rv.shape() != [m] || sv.shape() != [n] {
                return Err(Error::shape("modulate", &[m, n], &[rv.len(), sv.len()]));
            }
        }
        let rm: Vec<&[T]> = mult.iter().map(|&(r, _)| self.value(r).data()).collect();
        let sm: Vec<&[T]> = mult.iter().map(|&(_, s)| self.value(s).data()).collect();
        let ra: Vec<&[T]> = add.iter().map(|&(r, _)| self.value(r).data()).collect();
        let sa: Vec<&[T]> = add.iter().map(|&(_, s)| self.value(s).data()).collect();
        let w = wv.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let w_row = &w[i * n..(i + 1) * n];
            let o_row = &mut out[i * n..(i + 1) * n];
            // Row i of the gate is Σₜ rₜ[i] sₜ, so each pair is one axpy.
            for (r, s) in rm.iter().zip(&sm) {
                let ri = r[i];
                for (o, &sj) in o_row.iter_mut().zip(*s) {
                    *o += ri * sj;
                }
            }
            for (o, &wj) in o_row.iter_mut().zip(w_row) {
                *o *= wj;
            }
            for (a, b) in ra.iter().zip(&sa) {
                let ai = a[i];
                for (o, &bj) in o_row.iter_mut().zip(*b) {
                    *o += ai * bj;
                }
            }
        }
        let op = Op::Modulate {
            shared,
            mult: mult.to_vec(),
            add: add.to_vec(),
        };
        self.push("modulate", Tensor::from_raw(vec![m, n], out), op)
    }

    /// Gradients of `loss` with respect to every parameter leaf. May be
    /// called repeatedly; each call recomputes from scratch.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::ones(lv.shape()));
        let mut grads = Gradients::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, g, &mut adj, &mut grads);
        }
        Ok(grads)
    }

    /// Runs backward and adds the result into `store` grads.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads);
        Ok(())
    }

    fn propagate(&self, i: usize, g: Tensor<T>, adj: &mut [Option<Tensor<T>>], grads: &mut Gradients<T>) {
        let node = &self.nodes[i];
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => grads.add(*id, g),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                let ga = kernels::matmul_nt(g.data(), bv.data(), m, n, k);
                let gb = kernels::matmul_tn(av.data(), g.data(), m, k, n);
                acc(adj, *a, Tensor::from_raw(vec![m, k], ga));
                acc(adj, *b, Tensor::from_raw(vec![k, n], gb));
            }
            Op::Add(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g);
            }
            Op::Sub(a, b) => {
                acc(adj, *b, g.map(|x| -x));
                acc(adj, *a, g);
            }
            Op::Mul(a, b) => {
                let ga = zip(&g, val(*b), |x, y| x * y);
                let gb = zip(&g, val(*a), |x, y| x * y);
                acc(adj, *a, ga);
                acc(adj, *b, gb);
            }
            Op::Scale(a, c) => acc(adj, *a, g.scale(*c)),
            Op::RowScale(x, v) => {
                let (xv, vv) = (val(*x), val(*v));
                let n = vv.len();
                let mut gx = g.data().to_vec();
                let mut gv = vec![T::zero(); n];
                for (gr, xr) in gx.chunks_exact_mut(n).zip(xv.data().chunks_exact(n)) {
                    for j in 0..n {
                        gv[j] += gr[j] * xr[j];
                        gr[j] *= vv.data()[j];
                    }
                }
                acc(adj, *x, Tensor::from_raw(xv.shape().to_vec(), gx));
                acc(adj, *v, Tensor::from_raw(vec![n], gv));
            }
            Op::ColScale(x, v) => {
                let (xv, vv) = (val(*x), val(*v));
                let n = xv.cols();
                let mut gx = g.data().to_vec();
                let mut gv = vec![T::zero(); vv.len()];
                for (r, (gr, xr)) in gx.chunks_exact_mut(n).zip(xv.data().chunks_exact(n)).enumerate() {
                    let s = vv.data()[r];
                    for j in 0..n {
                        gv[r] += gr[j] * xr[j];
                        gr[j] *= s;
                    }
                }
                acc(adj, *x, Tensor::from_raw(xv.shape().to_vec(), gx));
                acc(adj, *v, Tensor::from_raw(vec![vv.len()], gv));
            }
            Op::Outer(u, v) => {
                let (uv, vv) = (val(*u), val(*v));
                let n = vv.len();
                let mut gu = vec![T::zero(); uv.len()];
                let mut gv = vec![T::zero(); n];
                for (r, gr) in g.data().chunks_exact(n).enumerate() {
                    gu[r] = kernels::dot(gr, vv.data());
                    let ur = uv.data()[r];
                    for (o, &x) in gv.iter_mut().zip(gr) {
                        *o += x * ur;
                    }
                }
                acc(adj, *u, Tensor::from_raw(vec![uv.len()], gu));
                acc(adj, *v, Tensor::from_raw(vec![n], gv));
            }
            Op::Sigmoid(x) => {
                let gx = zip(&g, &node.value, |gi, y| gi * y * (T::one() - y));
                acc(adj, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = zip(&g, &node.value, |gi, y| gi * (T::one() - y * y));
                acc(adj, *x, gx);
            }
            Op::Relu(x) => {
                let gx = zip(&g, &node.value, |gi, y| if y > T::zero() { gi } else { T::zero() });
                acc(adj, *x, gx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut gx = g.data().to_vec();
                for (gr, yr) in gx.chunks_exact_mut(n).zip(y.data().chunks_exact(n)) {
                    let inner = kernels::dot(gr, yr);
                    for (gv, &yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - inner);
                    }
                }
                acc(adj, *x, Tensor::from_raw(y.shape().to_vec(), gx));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut start = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                    }
                    acc(adj, p, Tensor::from_raw(pv.shape().to_vec(), gp));
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut start = 0;
                for &p in parts {
                    let pv = val(p);
                    let len = pv.rows() * n;
                    let gp = g.data()[start..start + len].to_vec();
                    acc(adj, p, Tensor::from_raw(pv.shape().to_vec(), gp));
                    start += len;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = val(*x);
                let n = xv.cols();
                let w = g.cols();
                let mut gx = vec![T::zero(); xv.len()];
                for r in 0..xv.rows() {
                    gx[r * n + start..r * n + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                acc(adj, *x, Tensor::from_raw(xv.shape().to_vec(), gx));
            }
            Op::SliceRows(x, start) => {
                let xv = val(*x);
                let n = xv.cols();
                let mut gx = vec![T::zero(); xv.len()];
                gx[start * n..start * n + g.len()].copy_from_slice(g.data());
                acc(adj, *x, Tensor::from_raw(xv.shape().to_vec(), gx));
            }
            Op::GatherRows(x, indices) => {
                let xv = val(*x);
                let n = xv.cols();
                let mut gx = vec![T::zero(); xv.len()];
                for (gr, &i) in g.data().chunks_exact(n).zip(indices) {
                    for (o, &v) in gx[i * n..(i + 1) * n].iter_mut().zip(gr) {
                        *o += v;
                    }
                }
                acc(adj, *x, Tensor::from_raw(xv.shape().to_vec(), gx));
            }
            Op::Sum(x) => {
                let xv = val(*x);
                acc(adj, *x, Tensor::full(xv.shape(), g.data()[0]));
            }
            Op::Mean(x) => {
                let xv = val(*x);
                let s = g.data()[0] / T::lit(xv.len() as f64);
                acc(adj, *x, Tensor::full(xv.shape(), s));
            }
            Op::Standardize { x, inv_std } => {
                let y = &node.value;
                let n = y.cols();
                let inv_n = T::one() / T::lit(n as f64);
                let mut gx = g.data().to_vec();
                for ((gr, yr), &inv) in gx.chunks_exact_mut(n).zip(y.data().chunks_exact(n)).zip(inv_std) {
                    let mean_g = gr.iter().copied().sum::<T>() * inv_n;
                    let mean_gy = kernels::dot(gr, yr) * inv_n;
                    for (gv, &yv) in gr.iter_mut().zip(yr) {
                        *gv = inv * (*gv - mean_g - yv * mean_gy);
                    }
                }
                acc(adj, *x, Tensor::from_raw(y.shape().to_vec(), gx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                probs,
                active,
            } => {
                let lv = val(*logits);
                let vocab = lv.cols();
                let s = g.data()[0] / T::lit(*active as f64);
                let mut gl = vec![T::zero(); lv.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *pad {
                        continue;
                    }
                    let row = &mut gl[r * vocab..(r + 1) * vocab];
                    for (o, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                        *o = p * s;
                    }
                    row[t] -= s;
                }
                acc(adj, *logits, Tensor::from_raw(lv.shape().to_vec(), gl));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                plan,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let d = qv.cols();
                let res = attention::backward(qv.data(), kv.data(), vv.data(), probs, g.data(), d, *heads, plan);
                acc(adj, *q, Tensor::from_raw(qv.shape().to_vec(), res.dq));
                acc(adj, *k, Tensor::from_raw(kv.shape().to_vec(), res.dk));
                acc(adj, *v, Tensor::from_raw(vv.shape().to_vec(), res.dv));
            }
            Op::Modulate { shared, mult, add } => {
                let wv = val(*shared);
                let (m, n) = (wv.rows(), wv.cols());
                let rm: Vec<&[T]> = mult.iter().map(|&(r, _)| val(r).data()).collect();
                let sm: Vec<&[T]> = mult.iter().map(|&(_, s)| val(s).data()).collect();
                let ra: Vec<&[T]> = add.iter().map(|&(r, _)| val(r).data()).collect();
                let sa: Vec<&[T]> = add.iter().map(|&(_, s)| val(s).data()).collect();
                let mut gw = vec![T::zero(); m * n];
                let mut grm = vec![vec![T::zero(); m]; rm.len()];
                let mut gsm = vec![vec![T::zero(); n]; rm.len()];
                let mut gra = vec![vec![T::zero(); m]; ra.len()];
                let mut gsa = vec![vec![T::zero(); n]; ra.len()];
                let (w, gd) = (wv.data(), g.data());
                let mut gm = vec![T::zero(); n];
                for i in 0..m {
                    let g_row = &gd[i * n..(i + 1) * n];
                    let w_row = &w[i * n..(i + 1) * n];
                    let gw_row = &mut gw[i * n..(i + 1) * n];
                    for (r, s) in rm.iter().zip(&sm) {
                        let ri = r[i];
                        for ((o, &gij), &sj) in gw_row.iter_mut().zip(g_row).zip(*s) {
                            *o += gij * ri * sj;
                        }
                    }
                    // Through the gate: d/dr and d/ds see G ⊙ W.
                    for ((o, &gij), &wij) in gm.iter_mut().zip(g_row).zip(w_row) {
                        *o = gij * wij;
                    }
                    for (t, (r, s)) in rm.iter().zip(&sm).enumerate() {
                        grm[t][i] += kernels::dot(&gm, s);
                        let ri = r[i];
                        for (o, &v) in gsm[t].iter_mut().zip(&gm) {
                            *o += v * ri;
                        }
                    }
                    for (t, (a, b)) in ra.iter().zip(&sa).enumerate() {
                        gra[t][i] += kernels::dot(g_row, b);
                        let ai = a[i];
                        for (o, &gij) in gsa[t].iter_mut().zip(g_row) {
                            *o += gij * ai;
                        }
                    }
                }
                acc(adj, *shared, Tensor::from_raw(vec![m, n], gw));
                for (t, &(r, s)) in mult.iter().enumerate() {
                    acc(adj, r, Tensor::from_raw(vec![m], std::mem::take(&mut grm[t])));
                    acc(adj, s, Tensor::from_raw(vec![n], std::mem::take(&mut gsm[t])));
                }
                for (t, &(r, s)) in add.iter().enumerate() {
                    acc(adj, r, Tensor::from_raw(vec![m], std::mem::take(&mut gra[t])));
                    acc(adj, s, Tensor::from_raw(vec![n], std::mem::take(&mut gsa[t])));
                }
            }
        }
    }
}

fn acc<T: Scalar>(adj: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_raw(a.shape().to_vec(), data)
}
