//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward and
//! backward pass. Every op records enough state to produce its vector-Jacobian
//! product; gradients only flow into nodes that (transitively) depend on a
//! trainable parameter.

use std::borrow::Cow;
use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::{log_sum_exp, softmax_in_place, Scalar};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Static description of one multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttentionSpec<S> {
    pub batch: usize,
    pub seq_len: usize,
    pub num_heads: usize,
    /// `key_valid[b * seq_len + j]` is false for padded key positions.
    pub key_valid: Vec<bool>,
    pub causal: bool,
    /// Optional multiplicative mask over attention probabilities,
    /// laid out `[batch, heads, seq_len, prefix_len + seq_len]`.
    pub prob_mask: Option<Vec<S>>,
}

struct AttentionState<S> {
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<(Var, Var)>,
    spec: AttentionSpec<S>,
    probs: Vec<S>,
}

struct GlobalPointerState {
    q: Var,
    k: Var,
    batch: usize,
    seq_len: usize,
    num_types: usize,
    head_dim: usize,
}

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Gelu(Var),
    Relu(Var),
    Scale(Var, S),
    MulConst(Var, Tensor<S>),
    Reshape(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Attention(Box<AttentionState<S>>),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<S>, scale: S },
    GlobalPointerScores(GlobalPointerState),
    GlobalPointerLoss { scores: Var, gold: Vec<bool>, pos_w: Vec<S>, neg_w: Vec<S>, scale: S },
    Sum(Vec<Var>),
}

struct Node<'a, S: Clone> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<'a, S: Scalar> {
    store: &'a ParamStore<S>,
    nodes: RefCell<Vec<Node<'a, S>>>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Self { store, nodes: RefCell::new(Vec::new()), param_vars: RefCell::new(HashMap::new()) }
    }

    pub fn store(&self) -> &'a ParamStore<S> {
        self.store
    }

    fn push(&self, value: Cow<'a, Tensor<S>>, op: Op<S>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(Cow::Borrowed(&p.value), Op::Param(id), p.trainable);
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    pub fn constant(&self, t: Tensor<S>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.cols(), bv.rows(), "matmul inner dims");
            av.matmul(&bv)
        };
        let rg = self.rg(&[a, b]);
        self.push(Cow::Owned(out), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            assert_eq!(bv.cols(), k, "matmul_nt inner dims");
            let mut out = vec![S::zero(); m * n];
            matmul_nt_into(av.data(), bv.data(), &mut out, m, k, n);
            Tensor::from_vec(&[m, n], out).expect("shape")
        };
        let rg = self.rg(&[a, b]);
        self.push(Cow::Owned(out), Op::MatMulNt(a, b), rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.shape(), bv.shape(), "add shapes");
            let mut out = av.clone();
            out.add_assign(&bv);
            out
        };
        let rg = self.rg(&[a, b]);
        self.push(Cow::Owned(out), Op::Add(a, b), rg)
    }

    /// Adds a vector to every row.
    pub fn add_bias(&self, a: Var, b: Var) -> Var {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.cols(), bv.numel(), "bias width");
            let mut out = av.clone();
            for r in 0..out.rows() {
                for (x, &y) in out.row_mut(r).iter_mut().zip(bv.data()) {
                    *x = *x + y;
                }
            }
            out
        };
        let rg = self.rg(&[a, b]);
        self.push(Cow::Owned(out), Op::AddBias(a, b), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let c = S::of(GELU_C);
        let k = S::of(0.044715);
        let half = S::of(0.5);
        let out = self.value(a).map(|x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(out), Op::Gelu(a), rg)
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(out), Op::Relu(a), rg)
    }

    pub fn scale(&self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(out), Op::Scale(a, c), rg)
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&self, a: Var, mask: Tensor<S>) -> Var {
        let out = {
            let av = self.value(a);
            assert_eq!(av.numel(), mask.numel(), "mask size");
            let data = av.data().iter().zip(mask.data()).map(|(&x, &m)| x * m).collect();
            Tensor::from_vec(av.shape(), data).expect("shape")
        };
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(out), Op::MulConst(a, mask), rg)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape).expect("reshape size");
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(out), Op::Reshape(a), rg)
    }

    /// Selects rows of a matrix; doubles as embedding lookup.
    pub fn gather_rows(&self, x: Var, rows: &[usize]) -> Var {
        let out = {
            let xv = self.value(x);
            let c = xv.cols();
            let mut data = Vec::with_capacity(rows.len() * c);
            for &r in rows {
                data.extend_from_slice(xv.row(r));
            }
            Tensor::from_vec(&[rows.len(), c], data).expect("shape")
        };
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(out), Op::GatherRows { x, rows: rows.to_vec() }, rg)
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: S) -> Var {
        let (out, xhat, inv_std) = {
            let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
            let (rows, n) = (xv.rows(), xv.cols());
            let nf = S::of(n as f64);
            let mut out = Tensor::zeros(xv.shape());
            let mut xhat = vec![S::zero(); rows * n];
            let mut inv_std = vec![S::zero(); rows];
            for r in 0..rows {
                let row = xv.row(r);
                let mean = row.iter().copied().sum::<S>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
                let is = S::one() / (var + eps).sqrt();
                inv_std[r] = is;
                let o = out.row_mut(r);
                for j in 0..n {
                    let h = (row[j] - mean) * is;
                    xhat[r * n + j] = h;
                    o[j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (out, xhat, inv_std)
        };
        let rg = self.rg(&[x, gamma, beta]);
        self.push(Cow::Owned(out), Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Scaled dot-product multi-head attention over row-packed `[batch * seq, d]`
    /// projections. `prefix` supplies extra key/value rows `[p, d]` shared by
    /// every sequence and always attended.
    pub fn attention(&self, q: Var, k: Var, v: Var, prefix: Option<(Var, Var)>, spec: AttentionSpec<S>) -> Var {
        let (out, probs) = {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            let pk = prefix.map(|(a, _)| self.value(a));
            let pv = prefix.map(|(_, b)| self.value(b));
            attention_forward(&qv, &kv, &vv, pk.as_deref(), pv.as_deref(), &spec)
        };
        let mut inputs = vec![q, k, v];
        if let Some((a, b)) = prefix {
            inputs.push(a);
            inputs.push(b);
        }
        let rg = self.rg(&inputs);
        self.push(Cow::Owned(out), Op::Attention(Box::new(AttentionState { q, k, v, prefix, spec, probs })), rg)
    }

    /// `scale * Σ_rows -log softmax(logits)[target]`, skipping rows whose target is `None`.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>], scale: S) -> Var {
        let (loss, probs) = {
            let lv = self.value(logits);
            assert_eq!(lv.rows(), targets.len(), "one target per row");
            let c = lv.cols();
            let mut probs = vec![S::zero(); lv.numel()];
            let mut loss = S::zero();
            for (r, t) in targets.iter().enumerate() {
                let row = lv.row(r);
                if let Some(t) = *t {
                    assert!(t < c, "target class out of range");
                    let lse = log_sum_exp(row.iter().copied());
                    loss = loss + (lse - row[t]);
                    let p = &mut probs[r * c..(r + 1) * c];
                    p.copy_from_slice(row);
                    softmax_in_place(p);
                }
            }
            (loss * scale, probs)
        };
        let rg = self.rg(&[logits]);
        self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, scale },
            rg,
        )
    }

    /// Bilinear span scores `[batch, types, L, L]` from per-type query/key rows
    /// packed as `[batch * L, types * head_dim]`. Cells with `valid == false`
    /// (laid out `[batch, L, L]`) are `-inf`.
    pub fn global_pointer_scores(
        &self,
        q: Var,
        k: Var,
        batch: usize,
        seq_len: usize,
        num_types: usize,
        valid: &[bool],
    ) -> Var {
        let (out, head_dim) = {
            let (qv, kv) = (self.value(q), self.value(k));
            let width = qv.cols();
            assert_eq!(width % num_types, 0);
            let h = width / num_types;
            let inv = S::one() / S::of(h as f64).sqrt();
            let mut out = Tensor::full(&[batch, num_types, seq_len, seq_len], S::neg_infinity());
            let od = out.data_mut();
            for b in 0..batch {
                for t in 0..num_types {
                    for i in 0..seq_len {
                        let qi = &qv.row(b * seq_len + i)[t * h..(t + 1) * h];
                        for j in 0..seq_len {
                            if !valid[(b * seq_len + i) * seq_len + j] {
                                continue;
                            }
                            let kj = &kv.row(b * seq_len + j)[t * h..(t + 1) * h];
                            let dot: S = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum();
                            od[((b * num_types + t) * seq_len + i) * seq_len + j] = dot * inv;
                        }
                    }
                }
            }
            (out, h)
        };
        let rg = self.rg(&[q, k]);
        let state = GlobalPointerState { q, k, batch, seq_len, num_types, head_dim };
        self.push(Cow::Owned(out), Op::GlobalPointerScores(state), rg)
    }

    /// Class-imbalance-robust multi-label loss over span scores, summed over
    /// every `(batch, type)` slice and multiplied by `scale`. `gold` is laid out
    /// like the score tensor. A gold cell whose score is `-inf` is an error.
    pub fn global_pointer_loss(&self, scores: Var, gold: &[bool], scale: S) -> Result<Var> {
        let (loss, pos_w, neg_w) = {
            let sv = self.value(scores);
            let shape = sv.shape();
            if shape.len() != 4 || gold.len() != sv.numel() {
                return Err(Error::Shape(format!("scores {:?} vs gold {}", shape, gold.len())));
            }
            let (b, t, l) = (shape[0], shape[1], shape[2]);
            let cells = l * l;
            let mut pos_w = vec![S::zero(); sv.numel()];
            let mut neg_w = vec![S::zero(); sv.numel()];
            let mut loss = S::zero();
            for slice in 0..b * t {
                let base = slice * cells;
                let s = &sv.data()[base..base + cells];
                let g = &gold[base..base + cells];
                for (c, (&sc, &is_gold)) in s.iter().zip(g).enumerate() {
                    if is_gold && sc == S::neg_infinity() {
                        let (ti, i, j) = (slice % t, c / l, c % l);
                        return Err(Error::GoldSpanOutOfRegion { type_id: ti, start: i, end: j });
                    }
                }
                let pos: Vec<S> = s.iter().zip(g).filter(|(_, &g)| g).map(|(&x, _)| -x).collect();
                let neg: Vec<S> = s
                    .iter()
                    .zip(g)
                    .filter(|(&x, &g)| !g && x != S::neg_infinity())
                    .map(|(&x, _)| x)
                    .collect();
                let lp = log_sum_exp(std::iter::once(S::zero()).chain(pos.iter().copied()));
                let ln = log_sum_exp(std::iter::once(S::zero()).chain(neg.iter().copied()));
                loss = loss + lp + ln;
                for (c, (&sc, &is_gold)) in s.iter().zip(g).enumerate() {
                    if is_gold {
                        pos_w[base + c] = (-sc - lp).exp();
                    } else if sc != S::neg_infinity() {
                        neg_w[base + c] = (sc - ln).exp();
                    }
                }
            }
            (loss * scale, pos_w, neg_w)
        };
        let rg = self.rg(&[scores]);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::GlobalPointerLoss { scores, gold: gold.to_vec(), pos_w, neg_w, scale },
            rg,
        ))
    }

    /// Sum of same-shaped nodes.
    pub fn sum(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let out = {
            let mut acc = self.value(vars[0]).clone();
            for &v in &vars[1..] {
                acc.add_assign(&self.value(v));
            }
            acc
        };
        let rg = self.rg(vars);
        self.push(Cow::Owned(out), Op::Sum(vars.to_vec()), rg)
    }

    /// Reverse sweep from a scalar node; returns gradients of trainable parameters.
    pub fn backward(&self, root: Var) -> Gradients<S> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), S::one()));
        let mut out = Gradients::new();

        for idx in (0..=root.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |v: Var| nodes[v.0].value.as_ref();
            let needs = |v: Var| nodes[v.0].requires_grad;
            let acc = |v: Var, t: Tensor<S>, grads: &mut Vec<Option<Tensor<S>>>| match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            };

            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if needs(*a) {
                        let mut da = vec![S::zero(); m * k];
                        matmul_nt_into(g.data(), bv.data(), &mut da, m, n, k);
                        acc(*a, Tensor::from_vec(av.shape(), da).unwrap(), &mut grads);
                    }
                    if needs(*b) {
                        let mut db = vec![S::zero(); k * n];
                        matmul_tn_into(av.data(), g.data(), &mut db, m, k, n);
                        acc(*b, Tensor::from_vec(bv.shape(), db).unwrap(), &mut grads);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    if needs(*a) {
                        let mut da = vec![S::zero(); m * k];
                        matmul_into(g.data(), bv.data(), &mut da, m, n, k);
                        acc(*a, Tensor::from_vec(av.shape(), da).unwrap(), &mut grads);
                    }
                    if needs(*b) {
                        let mut db = vec![S::zero(); n * k];
                        matmul_tn_into(g.data(), av.data(), &mut db, m, n, k);
                        acc(*b, Tensor::from_vec(bv.shape(), db).unwrap(), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        acc(*a, g.clone(), &mut grads);
                    }
                    if needs(*b) {
                        acc(*b, g, &mut grads);
                    }
                }
                Op::AddBias(a, b) => {
                    if needs(*b) {
                        let n = g.cols();
                        let mut db = vec![S::zero(); n];
                        for r in 0..g.rows() {
                            for (d, &x) in db.iter_mut().zip(g.row(r)) {
                                *d = *d + x;
                            }
                        }
                        acc(*b, Tensor::from_vec(val(*b).shape(), db).unwrap(), &mut grads);
                    }
                    if needs(*a) {
                        acc(*a, g, &mut grads);
                    }
                }
                Op::Gelu(a) => {
                    let c = S::of(GELU_C);
                    let k = S::of(0.044715);
                    let half = S::of(0.5);
                    let three = S::of(3.0);
                    let xs = val(*a);
                    let data = xs
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gy)| {
                            let t = (c * (x + k * x * x * x)).tanh();
                            let d = half * (S::one() + t)
                                + half * x * (S::one() - t * t) * c * (S::one() + three * k * x * x);
                            gy * d
                        })
                        .collect();
                    acc(*a, Tensor::from_vec(xs.shape(), data).unwrap(), &mut grads);
                }
                Op::Relu(a) => {
                    let xs = val(*a);
                    let data = xs
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gy)| if x > S::zero() { gy } else { S::zero() })
                        .collect();
                    acc(*a, Tensor::from_vec(xs.shape(), data).unwrap(), &mut grads);
                }
                Op::Scale(a, c) => acc(*a, g.map(|x| x * *c), &mut grads),
                Op::MulConst(a, m) => {
                    let data = g.data().iter().zip(m.data()).map(|(&x, &y)| x * y).collect();
                    acc(*a, Tensor::from_vec(g.shape(), data).unwrap(), &mut grads);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc(*a, g.reshape(&shape).unwrap(), &mut grads);
                }
                Op::GatherRows { x, rows } => {
                    let xs = val(*x);
                    let mut dx = Tensor::zeros(xs.shape());
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, &v) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d = *d + v;
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = val(*gamma);
                    let (rows, n) = (g.rows(), g.cols());
                    if needs(*gamma) || needs(*beta) {
                        let mut dg = vec![S::zero(); n];
                        let mut db = vec![S::zero(); n];
                        for r in 0..rows {
                            for j in 0..n {
                                let gy = g.data()[r * n + j];
                                dg[j] = dg[j] + gy * xhat[r * n + j];
                                db[j] = db[j] + gy;
                            }
                        }
                        if needs(*gamma) {
                            acc(*gamma, Tensor::from_vec(gv.shape(), dg).unwrap(), &mut grads);
                        }
                        if needs(*beta) {
                            acc(*beta, Tensor::from_vec(gv.shape(), db).unwrap(), &mut grads);
                        }
                    }
                    if needs(*x) {
                        let nf = S::of(n as f64);
                        let mut dx = Tensor::zeros(g.shape());
                        for r in 0..rows {
                            let mut sum_d = S::zero();
                            let mut sum_dx = S::zero();
                            for j in 0..n {
                                let dh = g.data()[r * n + j] * gv.data()[j];
                                sum_d = sum_d + dh;
                                sum_dx = sum_dx + dh * xhat[r * n + j];
                            }
                            let o = dx.row_mut(r);
                            for j in 0..n {
                                let dh = g.data()[r * n + j] * gv.data()[j];
                                o[j] = inv_std[r] / nf * (nf * dh - sum_d - xhat[r * n + j] * sum_dx);
                            }
                        }
                        acc(*x, dx, &mut grads);
                    }
                }
                Op::Attention(st) => {
                    let pk = st.prefix.map(|(a, _)| val(a));
                    let pv = st.prefix.map(|(_, b)| val(b));
                    let back = attention_backward(
                        val(st.q),
                        val(st.k),
                        val(st.v),
                        pk,
                        pv,
                        &st.spec,
                        &st.probs,
                        &g,
                    );
                    acc(st.q, back.dq, &mut grads);
                    acc(st.k, back.dk, &mut grads);
                    acc(st.v, back.dv, &mut grads);
                    if let (Some((a, b)), Some((dpk, dpv))) = (st.prefix, back.dprefix) {
                        acc(a, dpk, &mut grads);
                        acc(b, dpv, &mut grads);
                    }
                }
                Op::CrossEntropy { logits, targets, probs, scale } => {
                    let lv = val(*logits);
                    let c = lv.cols();
                    let gy = g.data()[0] * *scale;
                    let mut d = vec![S::zero(); lv.numel()];
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..c {
                                d[r * c + j] = gy * probs[r * c + j];
                            }
                            d[r * c + t] = d[r * c + t] - gy;
                        }
                    }
                    acc(*logits, Tensor::from_vec(lv.shape(), d).unwrap(), &mut grads);
                }
                Op::GlobalPointerScores(st) => {
                    let (qv, kv) = (val(st.q), val(st.k));
                    let (l, h, nt) = (st.seq_len, st.head_dim, st.num_types);
                    let inv = S::one() / S::of(h as f64).sqrt();
                    let mut dq = Tensor::zeros(qv.shape());
                    let mut dk = Tensor::zeros(kv.shape());
                    for b in 0..st.batch {
                        for t in 0..nt {
                            for i in 0..l {
                                for j in 0..l {
                                    let gi = g.data()[((b * nt + t) * l + i) * l + j];
                                    if gi == S::zero() || gi.is_nan() {
                                        continue;
                                    }
                                    let w = gi * inv;
                                    let width = nt * h;
                                    let qo = (b * l + i) * width + t * h;
                                    let ko = (b * l + j) * width + t * h;
                                    for e in 0..h {
                                        let qe = qv.data()[qo + e];
                                        let ke = kv.data()[ko + e];
                                        dq.data_mut()[qo + e] = dq.data()[qo + e] + w * ke;
                                        dk.data_mut()[ko + e] = dk.data()[ko + e] + w * qe;
                                    }
                                }
                            }
                        }
                    }
                    if needs(st.q) {
                        acc(st.q, dq, &mut grads);
                    }
                    if needs(st.k) {
                        acc(st.k, dk, &mut grads);
                    }
                }
                Op::GlobalPointerLoss { scores, gold, pos_w, neg_w, scale } => {
                    let sv = val(*scores);
                    let gy = g.data()[0] * *scale;
                    let data = (0..sv.numel())
                        .map(|c| if gold[c] { -gy * pos_w[c] } else { gy * neg_w[c] })
                        .collect();
                    acc(*scores, Tensor::from_vec(sv.shape(), data).unwrap(), &mut grads);
                }
                Op::Sum(vars) => {
                    for &v in vars {
                        if needs(v) {
                            acc(v, g.clone(), &mut grads);
                        }
                    }
                }
            }
        }
        out
    }
}

fn attention_forward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    pk: Option<&Tensor<S>>,
    pv: Option<&Tensor<S>>,
    spec: &AttentionSpec<S>,
) -> (Tensor<S>, Vec<S>) {
    let (bsz, l, nh) = (spec.batch, spec.seq_len, spec.num_heads);
    let d = q.cols();
    let dh = d / nh;
    let p = pk.map_or(0, |t| t.rows());
    let kl = p + l;
    let inv = S::one() / S::of(dh as f64).sqrt();
    let mut out = Tensor::zeros(&[bsz * l, d]);
    let mut probs = vec![S::zero(); bsz * nh * l * kl];
    let mut scores = vec![S::zero(); kl];

    for b in 0..bsz {
        for h in 0..nh {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..l {
                let qi = &q.row(b * l + i)[cols.clone()];
                for (j, s) in scores.iter_mut().enumerate() {
                    let key = if j < p {
                        Some(&pk.unwrap().row(j)[cols.clone()])
                    } else {
                        let jj = j - p;
                        let ok = spec.key_valid[b * l + jj] && (!spec.causal || jj <= i);
                        ok.then(|| &k.row(b * l + jj)[cols.clone()])
                    };
                    *s = match key {
                        Some(kj) => qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<S>() * inv,
                        None => S::neg_infinity(),
                    };
                }
                softmax_in_place(&mut scores);
                let base = ((b * nh + h) * l + i) * kl;
                probs[base..base + kl].copy_from_slice(&scores);
                let o = &mut out.row_mut(b * l + i)[cols.clone()];
                for (j, &pr) in scores.iter().enumerate() {
                    let w = match &spec.prob_mask {
                        Some(m) => pr * m[base + j],
                        None => pr,
                    };
                    if w == S::zero() {
                        continue;
                    }
                    let vj = if j < p { &pv.unwrap().row(j)[cols.clone()] } else { &v.row(b * l + j - p)[cols.clone()] };
                    for (x, &y) in o.iter_mut().zip(vj) {
                        *x = *x + w * y;
                    }
                }
            }
        }
    }
    (out, probs)
}

struct AttentionGrads<S> {
    dq: Tensor<S>,
    dk: Tensor<S>,
    dv: Tensor<S>,
    dprefix: Option<(Tensor<S>, Tensor<S>)>,
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    pk: Option<&Tensor<S>>,
    pv: Option<&Tensor<S>>,
    spec: &AttentionSpec<S>,
    probs: &[S],
    g: &Tensor<S>,
) -> AttentionGrads<S> {
    let (bsz, l, nh) = (spec.batch, spec.seq_len, spec.num_heads);
    let d = q.cols();
    let dh = d / nh;
    let p = pk.map_or(0, |t| t.rows());
    let kl = p + l;
    let inv = S::one() / S::of(dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dpk = pk.map(|t| Tensor::zeros(t.shape()));
    let mut dpv = pv.map(|t| Tensor::zeros(t.shape()));
    let mut dp = vec![S::zero(); kl];

    for b in 0..bsz {
        for h in 0..nh {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..l {
                let base = ((b * nh + h) * l + i) * kl;
                let pr = &probs[base..base + kl];
                let gi = &g.row(b * l + i)[cols.clone()];
                // dP_ij = g_i · v_j (times dropout mask), dV_j += w_ij g_i
                for j in 0..kl {
                    if pr[j] == S::zero() {
                        dp[j] = S::zero();
                        continue;
                    }
                    let m = spec.prob_mask.as_ref().map_or(S::one(), |m| m[base + j]);
                    let w = pr[j] * m;
                    let (vj, dvj) = if j < p {
                        (&pv.unwrap().row(j)[cols.clone()], &mut dpv.as_mut().unwrap().row_mut(j)[cols.clone()])
                    } else {
                        (&v.row(b * l + j - p)[cols.clone()], &mut dv.row_mut(b * l + j - p)[cols.clone()])
                    };
                    let mut dot = S::zero();
                    for e in 0..dh {
                        dot = dot + gi[e] * vj[e];
                        dvj[e] = dvj[e] + w * gi[e];
                    }
                    dp[j] = dot * m;
                }
                let inner: S = pr.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                let qi: Vec<S> = q.row(b * l + i)[cols.clone()].to_vec();
                let mut dqi = vec![S::zero(); dh];
                for j in 0..kl {
                    if pr[j] == S::zero() {
                        continue;
                    }
                    let ds = pr[j] * (dp[j] - inner) * inv;
                    let (kj, dkj) = if j < p {
                        (&pk.unwrap().row(j)[cols.clone()], &mut dpk.as_mut().unwrap().row_mut(j)[cols.clone()])
                    } else {
                        (&k.row(b * l + j - p)[cols.clone()], &mut dk.row_mut(b * l + j - p)[cols.clone()])
                    };
                    for e in 0..dh {
                        dqi[e] = dqi[e] + ds * kj[e];
                        dkj[e] = dkj[e] + ds * qi[e];
                    }
                }
                let dq_row = &mut dq.row_mut(b * l + i)[cols.clone()];
                for e in 0..dh {
                    dq_row[e] = dq_row[e] + dqi[e];
                }
            }
        }
    }
    AttentionGrads { dq, dk, dv, dprefix: dpk.zip(dpv) }
}
