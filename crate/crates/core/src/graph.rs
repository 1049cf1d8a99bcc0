//! Tape-based reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse from a `[1, 1]` scalar and
//! accumulates gradients into every node that (transitively) depends on a
//! trainable leaf. Constants never receive gradients.
//!
//! Sequences are stored flattened: a batch of `B` sequences of length `S`
//! with width `D` is a `[B * S, D]` matrix, item-major.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape of a packed multi-head attention input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<Array2<f64>>,
    },
    GatherRows(Var, Arc<[usize]>),
    ConcatRows(Vec<Var>),
    L2Normalize {
        x: Var,
        norms: Array1<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Arc<[usize]>,
        probs: Array2<f64>,
    },
    BinaryCrossEntropy {
        logits: Var,
        labels: Arc<[bool]>,
    },
    MeanSquaredError {
        pred: Var,
        targets: Arc<[f64]>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with the row maximum subtracted.
pub fn softmax_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
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

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// A trainable input: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = par::matmul(&self.value(a).view(), &self.value(b).view());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = par::matmul(&self.value(a).view(), &self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: bias must be one row");
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width mismatch");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// Multiplies `a` by the `[1, 1]` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let value = self.value(a) * c;
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::ScaleBy(a, s), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu_scalar);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / n;
        let mut normed = xv - &mean.view().insert_axis(Axis(1));
        let var = normed.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
        normed *= &inv_std.view().insert_axis(Axis(1));
        let value = &normed * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, heads * head_dim]`; `key_mask` has one
    /// entry per row and `false` keys receive zero attention weight. Every
    /// sequence must have at least one visible key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        key_mask: &[bool],
    ) -> Var {
        let (rows, width) = self.shape(q);
        let AttentionLayout { batch, seq, heads } = layout;
        assert_eq!(rows, batch * seq, "attention: rows != batch * seq");
        assert_eq!(width % heads, 0, "attention: width not divisible by heads");
        assert_eq!(key_mask.len(), rows, "attention: key mask length");
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));

        let results: Vec<(Array2<f64>, Array2<f64>)> = par::map_indexed(batch * heads, |bh| {
            let (b, h) = (bh / heads, bh % heads);
            let rs = b * seq..(b + 1) * seq;
            let cs = h * dh..(h + 1) * dh;
            let qs = qv.slice(s![rs.clone(), cs.clone()]);
            let ks = kv.slice(s![rs.clone(), cs.clone()]);
            let vs = vv.slice(s![rs.clone(), cs]);
            let mut scores = qs.dot(&ks.t()) * scale;
            for (j, &visible) in key_mask[rs].iter().enumerate() {
                if !visible {
                    scores.column_mut(j).fill(f64::NEG_INFINITY);
                }
            }
            let probs = softmax_rows(&scores.view());
            let out = probs.dot(&vs);
            (probs, out)
        });

        let mut value = Array2::<f64>::zeros((rows, width));
        let mut probs = Vec::with_capacity(results.len());
        for (bh, (p, o)) in results.into_iter().enumerate() {
            let (b, h) = (bh / heads, bh % heads);
            value
                .slice_mut(s![b * seq..(b + 1) * seq, h * dh..(h + 1) * dh])
                .assign(&o);
            probs.push(p);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            ng,
        )
    }

    /// Selects rows by index (repeats allowed). Used for embedding lookup,
    /// CLS extraction, masked-position selection and sequence assembly.
    pub fn gather_rows(&mut self, a: Var, idx: impl Into<Arc<[usize]>>) -> Var {
        let idx: Arc<[usize]> = idx.into();
        let av = self.value(a);
        let mut value = Array2::<f64>::zeros((idx.len(), av.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&av.row(i));
        }
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, idx), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Divides each row by its Euclidean norm. Callers reject zero rows.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms = xv.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        let value = xv / &norms.view().insert_axis(Axis(1));
        let ng = self.ng(x);
        self.push(value, Op::L2Normalize { x, norms }, ng)
    }

    /// Mean softmax cross-entropy of `logits` rows against class `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: impl Into<Arc<[usize]>>) -> Var {
        let targets: Arc<[usize]> = targets.into();
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "cross_entropy: one target per row");
        assert!(!targets.is_empty(), "cross_entropy: empty target set");
        let probs = softmax_rows(&lv.view());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
            total += lse - row[t];
        }
        let value = Array2::from_elem((1, 1), total / targets.len() as f64);
        let ng = self.ng(logits);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        )
    }

    /// Mean binary cross-entropy of single-column `logits` against `labels`.
    pub fn binary_cross_entropy(&mut self, logits: Var, labels: impl Into<Arc<[bool]>>) -> Var {
        let labels: Arc<[bool]> = labels.into();
        let lv = self.value(logits);
        assert_eq!(lv.dim(), (labels.len(), 1), "bce: logits must be [n, 1]");
        let total: f64 = lv
            .column(0)
            .iter()
            .zip(labels.iter())
            .map(|(&z, &y)| softplus(z) - if y { z } else { 0.0 })
            .sum();
        let value = Array2::from_elem((1, 1), total / labels.len() as f64);
        let ng = self.ng(logits);
        self.push(value, Op::BinaryCrossEntropy { logits, labels }, ng)
    }

    /// Mean squared error of single-column `pred` against `targets`.
    pub fn mean_squared_error(&mut self, pred: Var, targets: impl Into<Arc<[f64]>>) -> Var {
        let targets: Arc<[f64]> = targets.into();
        let pv = self.value(pred);
        assert_eq!(pv.dim(), (targets.len(), 1), "mse: predictions must be [n, 1]");
        let total: f64 = pv.column(0).iter().zip(targets.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
        let value = Array2::from_elem((1, 1), total / targets.len() as f64);
        let ng = self.ng(pred);
        self.push(value, Op::MeanSquaredError { pred, targets }, ng)
    }

    /// `Σ wᵢ·xᵢ` over `[1, 1]` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(
            Array2::from_elem((1, 1), total),
            Op::WeightedSum(terms.to_vec()),
            ng,
        )
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let da = par::matmul(&g.view(), &self.value(*b).t());
                        acc(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let db = par::matmul(&self.value(*a).t(), &g.view());
                        acc(&mut grads, *b, db);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        let da = par::matmul(&g.view(), &self.value(*b).view());
                        acc(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let db = par::matmul(&g.t(), &self.value(*a).view());
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Transpose(a) => {
                    acc(&mut grads, *a, g.t().as_standard_layout().to_owned());
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::ScaleBy(a, sv) => {
                    if self.ng(*sv) {
                        let ds = (&g * self.value(*a)).sum();
                        acc(&mut grads, *sv, Array2::from_elem((1, 1), ds));
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g * self.scalar(*sv));
                    }
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Gelu(a) => {
                    let mut d = self.value(*a).mapv(gelu_grad_scalar);
                    d *= &g;
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normed,
                    inv_std,
                } => {
                    if self.ng(*gamma) {
                        let dg = (&g * normed).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *gamma, dg);
                    }
                    if self.ng(*beta) {
                        acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let n = dxhat.ncols() as f64;
                        let sum_d = dxhat.sum_axis(Axis(1));
                        let sum_dx = (&dxhat * normed).sum_axis(Axis(1));
                        let mut dx = Array2::<f64>::zeros(dxhat.dim());
                        Zip::from(dx.rows_mut())
                            .and(dxhat.rows())
                            .and(normed.rows())
                            .and(&sum_d)
                            .and(&sum_dx)
                            .and(inv_std)
                            .for_each(|mut out, d, xh, &sd, &sdx, &inv| {
                                Zip::from(&mut out).and(&d).and(&xh).for_each(|o, &di, &xi| {
                                    *o = inv / n * (n * di - sd - xi * sdx);
                                });
                            });
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *layout, probs, &g);
                    if self.ng(*q) {
                        acc(&mut grads, *q, dq);
                    }
                    if self.ng(*k) {
                        acc(&mut grads, *k, dk);
                    }
                    if self.ng(*v) {
                        acc(&mut grads, *v, dv);
                    }
                }
                Op::GatherRows(a, idx) => {
                    let mut da = Array2::<f64>::zeros(self.shape(*a));
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = da.row_mut(i);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.shape(p).0;
                        if self.ng(p) {
                            acc(&mut grads, p, g.slice(s![offset..offset + n, ..]).to_owned());
                        }
                        offset += n;
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let dots = (&g * y).sum_axis(Axis(1));
                    let mut dx = g - &(y * &dots.view().insert_axis(Axis(1)));
                    dx /= &norms.view().insert_axis(Axis(1));
                    acc(&mut grads, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        d[[r, t]] -= 1.0;
                    }
                    acc(&mut grads, *logits, d * scale);
                }
                Op::BinaryCrossEntropy { logits, labels } => {
                    let scale = g[[0, 0]] / labels.len() as f64;
                    let lv = self.value(*logits);
                    let d = Array2::from_shape_fn(lv.dim(), |(r, _)| {
                        let y = if labels[r] { 1.0 } else { 0.0 };
                        (sigmoid(lv[[r, 0]]) - y) * scale
                    });
                    acc(&mut grads, *logits, d);
                }
                Op::MeanSquaredError { pred, targets } => {
                    let scale = 2.0 * g[[0, 0]] / targets.len() as f64;
                    let pv = self.value(*pred);
                    let d = Array2::from_shape_fn(pv.dim(), |(r, _)| (pv[[r, 0]] - targets[r]) * scale);
                    acc(&mut grads, *pred, d);
                }
                Op::WeightedSum(terms) => {
                    for &(t, w) in terms {
                        if self.ng(t) {
                            acc(&mut grads, t, Array2::from_elem((1, 1), w * g[[0, 0]]));
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: &[Array2<f64>],
        g: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let AttentionLayout { batch, seq, heads } = layout;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.ncols();
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let parts = par::map_indexed(batch * heads, |bh| {
            let (b, h) = (bh / heads, bh % heads);
            let rs = b * seq..(b + 1) * seq;
            let cs = h * dh..(h + 1) * dh;
            let p = &probs[bh];
            let go = g.slice(s![rs.clone(), cs.clone()]);
            let qs = qv.slice(s![rs.clone(), cs.clone()]);
            let ks = kv.slice(s![rs.clone(), cs.clone()]);
            let vs = vv.slice(s![rs, cs]);
            let dv = p.t().dot(&go);
            let dp = go.dot(&vs.t());
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let ds = (dp - &row_dot.insert_axis(Axis(1))) * p * scale;
            let dq = ds.dot(&ks);
            let dk = ds.t().dot(&qs);
            (dq, dk, dv)
        });
        let mut dq = Array2::<f64>::zeros((batch * seq, width));
        let mut dk = dq.clone();
        let mut dv = dq.clone();
        for (bh, (pq, pk, pv)) in parts.into_iter().enumerate() {
            let (b, h) = (bh / heads, bh % heads);
            let sl = s![b * seq..(b + 1) * seq, h * dh..(h + 1) * dh];
            dq.slice_mut(sl).assign(&pq);
            dk.slice_mut(sl).assign(&pk);
            dv.slice_mut(sl).assign(&pv);
        }
        (dq, dk, dv)
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Graph::backward`], retained for leaves only.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
