// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value. Nodes are
//! created in dependency order, so walking the tape backwards is a reverse
//! topological traversal. Leaves are either trainable parameters (tagged with
//! a [`ParamId`]) or constants; gradients only flow into nodes that depend on
//! at least one parameter, which keeps frozen prefixes of a network out of
//! the reverse pass entirely.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{kernels, matmul_dims, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Caller-chosen identity of a trainable leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// One row-wise cross-entropy term: `(row, class, weight)`.
#[derive(Debug, Clone, Copy)]
pub struct CeTarget<F> {
    pub row: usize,
    pub class: usize,
    pub weight: F,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Transpose(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterAddRows {
        x: Var,
        src: Var,
        rows: Vec<usize>,
    },
    OverwriteRows {
        x: Var,
        src: Var,
        rows: Vec<usize>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<F>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        /// `[heads, T, T]`, zero above the diagonal.
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<CeTarget<F>>,
        /// One softmax row per target.
        probs: Vec<F>,
        total_weight: F,
    },
    Sum(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    by_param: BTreeMap<ParamId, Tensor<F>>,
    visit_order: Vec<Var>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_map(self) -> BTreeMap<ParamId, Tensor<F>> {
        self.by_param
    }

    /// Nodes whose backward rule ran, in the order they ran.
    pub fn visit_order(&self) -> &[Var] {
        &self.visit_order
    }
}

/// Wengert list of primitive operations.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, None)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<F>) -> Var {
        self.push_leaf(value, Some(id))
    }

    fn push_leaf(&mut self, value: Tensor<F>, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: param.is_some(),
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected a 2-D operand, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        self.same_shape(a, b, name)?;
        let (x, y) = (self.value(a), self.value(b));
        Ok(Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |p, q| p + q)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |p, q| p - q)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |p, q| p * q)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row")?;
        if self.value(b).numel() != n {
            return Err(Error::shape("add_row", format!("bias of {} for width {n}", self.value(b).numel())));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push("add_row", Tensor::from_parts(vec![m, n], out), Op::AddRow(x, b), &[x, b])
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let value = self.value(x).scale(s);
        self.push("scale", value, Op::Scale(x, s), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, n) = self.dims2(table, "gather")?;
        if ids.is_empty() {
            return Err(Error::shape("gather", "empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("gather", format!("id {bad} out of range for {vocab} rows")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_parts(vec![ids.len(), n], out);
        self.push("gather", value, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let value = {
            let (m, n) = self.dims2(x, "select_rows")?;
            check_rows(rows, m, "select_rows")?;
            let t = self.value(x);
            let mut out = Vec::with_capacity(rows.len() * n);
            for &r in rows {
                out.extend_from_slice(t.row(r));
            }
            Tensor::from_parts(vec![rows.len(), n], out)
        };
        self.push("select_rows", value, Op::SelectRows { x, rows: rows.to_vec() }, &[x])
    }

    /// `y = x` with `y[rows[k]] += src[k]`.
    pub fn scatter_add_rows(&mut self, x: Var, rows: &[usize], src: Var) -> Result<Var> {
        let value = self.scatter(x, rows, src, "scatter_add_rows", true)?;
        self.push(
            "scatter_add_rows",
            value,
            Op::ScatterAddRows { x, src, rows: rows.to_vec() },
            &[x, src],
        )
    }

    /// `y = x` with `y[rows[k]] = src[k]`. Rows must be distinct.
    pub fn overwrite_rows(&mut self, x: Var, rows: &[usize], src: Var) -> Result<Var> {
        let mut sorted = rows.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != rows.len() {
            return Err(Error::shape("overwrite_rows", "duplicate row indices"));
        }
        let value = self.scatter(x, rows, src, "overwrite_rows", false)?;
        self.push(
            "overwrite_rows",
            value,
            Op::OverwriteRows { x, src, rows: rows.to_vec() },
            &[x, src],
        )
    }

    fn scatter(&self, x: Var, rows: &[usize], src: Var, op: &'static str, add: bool) -> Result<Tensor<F>> {
        let (m, n) = self.dims2(x, op)?;
        check_rows(rows, m, op)?;
        let s = self.value(src);
        if s.shape() != [rows.len(), n] {
            return Err(Error::shape(op, format!("source {:?} for {} rows of width {n}", s.shape(), rows.len())));
        }
        let mut out = self.value(x).data().to_vec();
        for (k, &r) in rows.iter().enumerate() {
            let dst = &mut out[r * n..(r + 1) * n];
            if add {
                for (d, &v) in dst.iter_mut().zip(s.row(k)) {
                    *d += v;
                }
            } else {
                dst.copy_from_slice(s.row(k));
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// Row-wise RMS normalization with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: F) -> Result<Var> {
        let (m, n) = self.dims2(x, "rms_norm")?;
        if self.value(gain).numel() != n {
            return Err(Error::shape("rms_norm", format!("gain of {} for width {n}", self.value(gain).numel())));
        }
        let (xv, g) = (self.value(x).data(), self.value(gain).data());
        let mut out = vec![F::zero(); m * n];
        let mut inv_rms = Vec::with_capacity(m);
        let width = F::lit(n as f64);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let ms = kernels::dot(row, row) / width;
            let r = F::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            for ((o, &xv), &gv) in out[i * n..(i + 1) * n].iter_mut().zip(row).zip(g) {
                *o = xv * r * gv;
            }
        }
        let value = Tensor::from_parts(vec![m, n], out);
        self.push("rms_norm", value, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| gelu(v).0);
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    /// Multi-head causal self-attention over `[T, d]` projections.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.dims2(q, "causal_attention")?;
        self.same_shape(q, k, "causal_attention")?;
        self.same_shape(q, v, "causal_attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("causal_attention", format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![F::zero(); heads * t * t];
        let mut out = vec![F::zero(); t * d];
        let mut scores = vec![F::zero(); t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &qv[i * d + off..i * d + off + dh];
                let mut max = F::neg_infinity();
                for j in 0..=i {
                    let s = kernels::dot(qi, &kv[j * d + off..j * d + off + dh]) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut denom = F::zero();
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                let prow = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let p = scores[j] / denom;
                    prow[j] = p;
                    kernels::axpy(p, &vv[j * d + off..j * d + off + dh], orow);
                }
            }
        }
        let value = Tensor::from_parts(vec![t, d], out);
        self.push("causal_attention", value, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Weighted mean of `-log softmax(logits[row])[class]` over the targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[CeTarget<F>]) -> Result<Var> {
        let (m, n) = self.dims2(logits, "cross_entropy")?;
        if targets.is_empty() {
            return Err(Error::shape("cross_entropy", "no targets"));
        }
        let mut total_weight = F::zero();
        for t in targets {
            if t.row >= m || t.class >= n {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("target ({}, {}) outside {m}x{n} logits", t.row, t.class),
                ));
            }
            if t.weight < F::zero() {
                return Err(Error::shape("cross_entropy", "negative target weight"));
            }
            total_weight += t.weight;
        }
        if total_weight <= F::zero() {
            return Err(Error::shape("cross_entropy", "target weights sum to zero"));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(targets.len() * n);
        let mut loss = F::zero();
        for t in targets {
            let row = lv.row(t.row);
            let (p, log_z) = softmax_row(row);
            loss += t.weight * (log_z - row[t.class]);
            probs.extend(p);
        }
        let value = Tensor::scalar(loss / total_weight);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                total_weight,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, F::one() / F::lit(n as f64))
    }

    /// Runs the reverse pass from a scalar `loss`.
    ///
    /// Every parameter leaf on the tape receives an entry; parameters the
    /// loss does not depend on map to zeros. A tape can be differentiated
    /// once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::Autodiff("tape already consumed".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Autodiff("loss is not on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut by_param: BTreeMap<ParamId, Tensor<F>> = BTreeMap::new();
        let mut visit_order = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visit_order.push(Var(idx));
            self.backward_node(node, &g, &mut grads, &mut by_param)?;
        }

        for node in &self.nodes {
            if let Some(id) = node.param {
                by_param
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { by_param, visit_order })
    }

    fn backward_node(
        &self,
        node: &Node<F>,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        by_param: &mut BTreeMap<ParamId, Tensor<F>>,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {
                if let Some(id) = node.param {
                    match by_param.get_mut(&id) {
                        Some(t) => {
                            for (a, &b) in t.data_mut().iter_mut().zip(g) {
                                *a += b;
                            }
                        }
                        None => {
                            by_param.insert(id, Tensor::from_parts(node.value.shape().to_vec(), g.to_vec()));
                        }
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k, n) = matmul_dims(self.value(a), self.value(b))?;
                if self.requires_grad(a) {
                    let b_data = self.value(b).data();
                    kernels::matmul_nt_acc(g, b_data, m, k, n, self.grad_buf(grads, a));
                }
                if self.requires_grad(b) {
                    let a_data = self.value(a).data();
                    kernels::matmul_tn_acc(a_data, g, m, k, n, self.grad_buf(grads, b));
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.requires_grad(v) {
                        kernels::axpy(F::one(), g, self.grad_buf(grads, v));
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.requires_grad(a) {
                    kernels::axpy(F::one(), g, self.grad_buf(grads, a));
                }
                if self.requires_grad(b) {
                    kernels::axpy(-F::one(), g, self.grad_buf(grads, b));
                }
            }
            &Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let other = self.value(b).data();
                    let buf = self.grad_buf(grads, a);
                    for ((d, &gv), &o) in buf.iter_mut().zip(g).zip(other) {
                        *d += gv * o;
                    }
                }
                if self.requires_grad(b) {
                    let other = self.value(a).data();
                    let buf = self.grad_buf(grads, b);
                    for ((d, &gv), &o) in buf.iter_mut().zip(g).zip(other) {
                        *d += gv * o;
                    }
                }
            }
            &Op::AddRow(x, b) => {
                if self.requires_grad(x) {
                    kernels::axpy(F::one(), g, self.grad_buf(grads, x));
                }
                if self.requires_grad(b) {
                    let n = self.value(b).numel();
                    let buf = self.grad_buf(grads, b);
                    for row in g.chunks_exact(n) {
                        kernels::axpy(F::one(), row, buf);
                    }
                }
            }
            &Op::Scale(x, s) => {
                if self.requires_grad(x) {
                    kernels::axpy(s, g, self.grad_buf(grads, x));
                }
            }
            &Op::Transpose(x) => {
                if self.requires_grad(x) {
                    let s = node.value.shape();
                    let (m, n) = (s[0], s[1]);
                    let buf = self.grad_buf(grads, x);
                    // out is [m, n] = xᵀ, so x is [n, m]
                    for i in 0..m {
                        for j in 0..n {
                            buf[j * m + i] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.requires_grad(*table) {
                    let n = self.value(*table).cols();
                    let buf = self.grad_buf(grads, *table);
                    for (k, &id) in ids.iter().enumerate() {
                        kernels::axpy(F::one(), &g[k * n..(k + 1) * n], &mut buf[id * n..(id + 1) * n]);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if self.requires_grad(*x) {
                    let n = self.value(*x).cols();
                    let buf = self.grad_buf(grads, *x);
                    for (k, &r) in rows.iter().enumerate() {
                        kernels::axpy(F::one(), &g[k * n..(k + 1) * n], &mut buf[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::ScatterAddRows { x, src, rows } => {
                if self.requires_grad(*x) {
                    kernels::axpy(F::one(), g, self.grad_buf(grads, *x));
                }
                if self.requires_grad(*src) {
                    let n = self.value(*x).cols();
                    let buf = self.grad_buf(grads, *src);
                    for (k, &r) in rows.iter().enumerate() {
                        kernels::axpy(F::one(), &g[r * n..(r + 1) * n], &mut buf[k * n..(k + 1) * n]);
                    }
                }
            }
            Op::OverwriteRows { x, src, rows } => {
                let n = self.value(*x).cols();
                if self.requires_grad(*x) {
                    let buf = self.grad_buf(grads, *x);
                    let m = buf.len() / n;
                    // overwritten rows receive no gradient
                    for i in (0..m).filter(|i| !rows.contains(i)) {
                        kernels::axpy(F::one(), &g[i * n..(i + 1) * n], &mut buf[i * n..(i + 1) * n]);
                    }
                }
                if self.requires_grad(*src) {
                    let buf = self.grad_buf(grads, *src);
                    for (k, &r) in rows.iter().enumerate() {
                        kernels::axpy(F::one(), &g[r * n..(r + 1) * n], &mut buf[k * n..(k + 1) * n]);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let n = gv.len();
                let width = F::lit(n as f64);
                if self.requires_grad(*gain) {
                    let buf = self.grad_buf(grads, *gain);
                    for (i, &r) in inv_rms.iter().enumerate() {
                        for j in 0..n {
                            buf[j] += g[i * n + j] * xv[i * n + j] * r;
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let buf = self.grad_buf(grads, *x);
                    for (i, &r) in inv_rms.iter().enumerate() {
                        let row = &xv[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let mut s = F::zero();
                        for j in 0..n {
                            s += grow[j] * gv[j] * row[j];
                        }
                        let c = r * r * r * s / width;
                        for j in 0..n {
                            buf[i * n + j] += r * gv[j] * grow[j] - c * row[j];
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if self.requires_grad(x) {
                    let xv = self.value(x).data();
                    let buf = self.grad_buf(grads, x);
                    for ((d, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu(v).1;
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                total_weight,
            } => {
                if self.requires_grad(*logits) {
                    let n = self.value(*logits).cols();
                    let up = g[0] / *total_weight;
                    let buf = self.grad_buf(grads, *logits);
                    for (k, t) in targets.iter().enumerate() {
                        let w = up * t.weight;
                        let p = &probs[k * n..(k + 1) * n];
                        let dst = &mut buf[t.row * n..(t.row + 1) * n];
                        kernels::axpy(w, p, dst);
                        dst[t.class] -= w;
                    }
                }
            }
            &Op::Sum(x) => {
                if self.requires_grad(x) {
                    let buf = self.grad_buf(grads, x);
                    for d in buf.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (t, d) = {
            let s = self.value(q).shape();
            (s[0], s[1])
        };
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![F::zero(); t * d];
        let mut dk = vec![F::zero(); t * d];
        let mut dv = vec![F::zero(); t * d];
        let mut dp = vec![F::zero(); t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let prow = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                let go = &g[i * d + off..i * d + off + dh];
                let mut dot_sum = F::zero();
                for j in 0..=i {
                    kernels::axpy(prow[j], go, &mut dv[j * d + off..j * d + off + dh]);
                    dp[j] = kernels::dot(go, &vv[j * d + off..j * d + off + dh]);
                    dot_sum += prow[j] * dp[j];
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot_sum) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    kernels::axpy(ds, &kv[j * d + off..j * d + off + dh], &mut dq[i * d + off..i * d + off + dh]);
                    kernels::axpy(ds, &qv[i * d + off..i * d + off + dh], &mut dk[j * d + off..j * d + off + dh]);
                }
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if self.requires_grad(var) {
                kernels::axpy(F::one(), &grad, self.grad_buf(grads, var));
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> &'g mut Vec<F> {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
    }
}

fn check_rows(rows: &[usize], m: usize, op: &'static str) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::shape(op, "empty row list"));
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
        return Err(Error::shape(op, format!("row {bad} out of range for {m} rows")));
    }
    Ok(())
}

/// Value and derivative of the tanh-approximated GELU.
fn gelu<F: Scalar>(x: F) -> (F, F) {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = F::lit(0.044_715);
    let half = F::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let value = half * x * (F::one() + th);
    let deriv = half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + F::lit(3.0) * a * x * x);
    (value, deriv)
}

/// Softmax of one row together with its log-partition.
pub(crate) fn softmax_row<F: Scalar>(row: &[F]) -> (Vec<F>, F) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut p: Vec<F> = row.iter().map(|&x| (x - max).exp()).collect();
    let z: F = p.iter().copied().sum();
    for v in &mut p {
        *v /= z;
    }
    (p, max + z.ln())
}

/// Largest relative disagreement between the tape's gradient and central
/// finite differences, over every coordinate of every parameter.
///
/// `f` builds a scalar from parameter handles; it is evaluated once on a
/// differentiating tape and twice per coordinate on plain tapes.
pub fn finite_difference_check<F: Scalar>(
    f: impl Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
    params: &[Tensor<F>],
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid("finite-difference step", format!("{eps} (must be > 0)")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(ParamId(i), p.clone()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite { op: "finite_difference_check" });
    }
    let grads = tape.backward(loss)?;

    let eval = |ps: &[Tensor<F>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        let value = t.scalar(out).as_f64();
        if value.is_nan() {
            return Err(Error::NonFinite { op: "finite_difference_check" });
        }
        Ok(value)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<F>> = params.to_vec();
    for (i, p) in params.iter().enumerate() {
        let analytic = grads.get(ParamId(i)).expect("every parameter has a gradient entry");
        for j in 0..p.numel() {
            let orig = p.data()[j];
            work[i].data_mut()[j] = F::lit(orig.as_f64() + eps);
            let plus = eval(&work)?;
            work[i].data_mut()[j] = F::lit(orig.as_f64() - eps);
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let central = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j].as_f64();
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
