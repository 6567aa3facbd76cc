//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every operation appends a node holding its value and whatever it needs
//! for the backward pass. Nodes are created in topological order, so the
//! backward sweep simply walks them in reverse, visiting each once.

use std::sync::Arc;

use super::tensor::{matmul, matmul_a_bt_acc, matmul_at_b_acc, Tensor};
use crate::masking::AttentionMask;
use crate::scalar::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Sigmoid(Var),
    Exp(Var),
    NormalizeRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, rstd: Vec<T> },
    Attention(Box<AttentionCache<T>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    /// Loss nodes cache d(loss)/d(input) from the forward pass.
    CachedGrad(Var, Tensor<T>),
}

struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale: T,
    mask: Option<Arc<AttentionMask>>,
    /// `heads × nq × nk`, zero where blocked.
    probs: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, materializing zeros when it is unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul inner dimension");
        let out = matmul(av, bv);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.shape(b), "add shape");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// `a` (n×m) plus row vector `b` (1×m) broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        let bv = self.value(b);
        assert_eq!((1, out.cols), bv.shape(), "add_row shape");
        for r in 0..out.rows {
            for (o, &x) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a))
    }

    /// Each row scaled to unit Euclidean length; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = v.clone();
        for r in 0..v.rows {
            let n = dot(v.row(r), v.row(r)).sqrt();
            if n > T::zero() {
                out.row_mut(r).iter_mut().for_each(|x| *x /= n);
            }
        }
        self.push(out, Op::NormalizeRows(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (1×m each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        assert_eq!(self.shape(gamma), (1, m));
        assert_eq!(self.shape(beta), (1, m));
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mf = T::lit(m as f64);
        let mut xhat = Tensor::zeros(n, m);
        let mut out = Tensor::zeros(n, m);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / mf;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / mf;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..m {
                let h = (row[c] - mean) * rs;
                xhat.data[r * m + c] = h;
                out.data[r * m + c] = h * g[c] + b[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Multi-head scaled dot-product attention. Heads split the columns of
    /// `q`, `k`, `v` evenly. Blocked entries get exactly zero weight and are
    /// never read; a row with every key blocked outputs zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<Arc<AttentionMask>>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, e) = qv.shape();
        let nk = kv.rows;
        let ev = vv.cols;
        assert_eq!(kv.cols, e, "attention key width");
        assert_eq!(vv.rows, nk, "attention value rows");
        assert!(heads >= 1 && e % heads == 0 && ev % heads == 0, "heads must divide widths");
        if let Some(m) = &mask {
            assert_eq!((m.len(), m.len()), (nq, nk), "mask shape");
        }
        let (dh, dv) = (e / heads, ev / heads);
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = Tensor::zeros(nq, ev);
        let mut logits = vec![T::zero(); nk];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let vcols = h * dv..(h + 1) * dv;
            for i in 0..nq {
                let blocked = mask.as_ref().map(|m| m.row(i));
                let qi = &qv.row(i)[cols.clone()];
                let mut max = T::neg_infinity();
                for j in 0..nk {
                    if blocked.is_some_and(|b| b[j]) {
                        continue;
                    }
                    let kj = &kv.row(j)[cols.clone()];
                    let s = dot(qi, kj) * scale;
                    logits[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let mut sum = T::zero();
                for j in 0..nk {
                    if blocked.is_some_and(|b| b[j]) {
                        continue;
                    }
                    let e = (logits[j] - max).exp();
                    p[j] = e;
                    sum += e;
                }
                let inv = T::one() / sum;
                let orow = &mut out.data[i * ev..(i + 1) * ev][vcols.clone()];
                for j in 0..nk {
                    if blocked.is_some_and(|b| b[j]) {
                        continue;
                    }
                    p[j] *= inv;
                    let pj = p[j];
                    for (o, &x) in orow.iter_mut().zip(&vv.row(j)[vcols.clone()]) {
                        *o += pj * x;
                    }
                }
            }
        }
        let cache = AttentionCache { q, k, v, heads, scale, mask, probs };
        self.push(out, Op::Attention(Box::new(cache)))
    }

    /// Attention weights `heads × nq × nk` of an attention node.
    pub fn attention_probs(&self, node: Var) -> Option<&[T]> {
        match &self.nodes[node.0].op {
            Op::Attention(c) => Some(&c.probs),
            _ => None,
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows width");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols height");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.rows, "slice_rows bounds");
        let data = v.data[start * v.cols..(start + len) * v.cols].to_vec();
        let out = Tensor::from_vec(len, v.cols, data);
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.cols, "slice_cols bounds");
        let mut out = Tensor::zeros(v.rows, len);
        for r in 0..v.rows {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().fold(T::zero(), |s, &v| s + v);
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Sigmoid focal loss summed over all elements and divided by `norm`.
    /// `targets` holds 0/1 per element.
    pub fn focal_loss(&mut self, logits: Var, targets: &Tensor<T>, gamma: T, alpha: T, norm: T) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "focal target shape");
        let mut grad = Tensor::zeros(lv.rows, lv.cols);
        let mut total = T::zero();
        for (idx, (&x, &t)) in lv.data.iter().zip(&targets.data).enumerate() {
            let (l, g) = focal_element(x, t > T::lit(0.5), gamma, alpha);
            total += l;
            grad.data[idx] = g / norm;
        }
        self.push(Tensor::scalar(total / norm), Op::CachedGrad(logits, grad))
    }

    /// `Σ_r w_r Σ_c |pred - target|`.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<T>, row_weights: &[T]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "l1 target shape");
        assert_eq!(row_weights.len(), pv.rows, "l1 row weights");
        let mut grad = Tensor::zeros(pv.rows, pv.cols);
        let mut total = T::zero();
        for r in 0..pv.rows {
            let w = row_weights[r];
            if w == T::zero() {
                continue;
            }
            for c in 0..pv.cols {
                let d = pv.at(r, c) - target.at(r, c);
                total += w * d.abs();
                let s = if d > T::zero() {
                    T::one()
                } else if d < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                grad.set(r, c, w * s);
            }
        }
        self.push(Tensor::scalar(total), Op::CachedGrad(pred, grad))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.shape(output), (1, 1), "backward from a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                matmul_a_bt_acc(g, bv, slot(grads, *a, av.shape()));
                matmul_at_b_acc(av, g, slot(grads, *b, bv.shape()));
            }
            Op::Add(a, b) => {
                slot(grads, *a, g.shape()).add_assign(g);
                slot(grads, *b, g.shape()).add_assign(g);
            }
            Op::AddRow(a, b) => {
                slot(grads, *a, g.shape()).add_assign(g);
                let gb = slot(grads, *b, (1, g.cols));
                for r in 0..g.rows {
                    for (o, &x) in gb.data.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::Sub(a, b) => {
                slot(grads, *a, g.shape()).add_assign(g);
                let gb = slot(grads, *b, g.shape());
                for (o, &x) in gb.data.iter_mut().zip(&g.data) {
                    *o -= x;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, g.shape());
                for ((o, &x), &y) in ga.data.iter_mut().zip(&g.data).zip(&bv.data) {
                    *o += x * y;
                }
                let gb = slot(grads, *b, g.shape());
                for ((o, &x), &y) in gb.data.iter_mut().zip(&g.data).zip(&av.data) {
                    *o += x * y;
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, g.shape());
                for (o, &x) in ga.data.iter_mut().zip(&g.data) {
                    *o += x * *s;
                }
            }
            Op::Silu(a) => {
                let xv = self.value(*a);
                let ga = slot(grads, *a, g.shape());
                for ((o, &gx), &x) in ga.data.iter_mut().zip(&g.data).zip(&xv.data) {
                    let s = sigmoid(x);
                    *o += gx * s * (T::one() + x * (T::one() - s));
                }
            }
            Op::Sigmoid(a) => {
                let ga = slot(grads, *a, g.shape());
                for ((o, &gx), &y) in ga.data.iter_mut().zip(&g.data).zip(&node.value.data) {
                    *o += gx * y * (T::one() - y);
                }
            }
            Op::Exp(a) => {
                let ga = slot(grads, *a, g.shape());
                for ((o, &gx), &y) in ga.data.iter_mut().zip(&g.data).zip(&node.value.data) {
                    *o += gx * y;
                }
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let ga = slot(grads, *a, g.shape());
                for r in 0..g.rows {
                    let n = dot(x.row(r), x.row(r)).sqrt();
                    if n == T::zero() {
                        continue;
                    }
                    let y = node.value.row(r);
                    let gy = g.row(r);
                    let proj = dot(y, gy);
                    for ((o, &gi), &yi) in ga.row_mut(r).iter_mut().zip(gy).zip(y) {
                        *o += (gi - yi * proj) / n;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (n, m) = g.shape();
                let gam = &self.value(*gamma).data;
                {
                    let gg = slot(grads, *gamma, (1, m));
                    for r in 0..n {
                        for c in 0..m {
                            gg.data[c] += g.at(r, c) * xhat.at(r, c);
                        }
                    }
                }
                {
                    let gb = slot(grads, *beta, (1, m));
                    for r in 0..n {
                        for (o, &v) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                let gx = slot(grads, *x, (n, m));
                let mf = T::lit(m as f64);
                let mut dxhat = vec![T::zero(); m];
                for r in 0..n {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for c in 0..m {
                        let d = g.at(r, c) * gam[c];
                        dxhat[c] = d;
                        s1 += d;
                        s2 += d * xhat.at(r, c);
                    }
                    let k = rstd[r] / mf;
                    for c in 0..m {
                        gx.data[r * m + c] += k * (mf * dxhat[c] - s1 - xhat.at(r, c) * s2);
                    }
                }
            }
            Op::Attention(cache) => self.backward_attention(cache, g, grads),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let gp = slot(grads, p, (r, c));
                    for (o, &x) in gp.data.iter_mut().zip(&g.data[off * c..(off + r) * c]) {
                        *o += x;
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let gp = slot(grads, p, (r, c));
                    for row in 0..r {
                        for (o, &x) in gp.row_mut(row).iter_mut().zip(&g.row(row)[off..off + c]) {
                            *o += x;
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let shape = self.shape(*a);
                let ga = slot(grads, *a, shape);
                let c = shape.1;
                for (o, &x) in ga.data[start * c..(start + g.rows) * c].iter_mut().zip(&g.data) {
                    *o += x;
                }
            }
            Op::SliceCols(a, start) => {
                let shape = self.shape(*a);
                let ga = slot(grads, *a, shape);
                for r in 0..g.rows {
                    for (o, &x) in ga.row_mut(r)[*start..start + g.cols].iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                let ga = slot(grads, *a, self.shape(*a));
                for o in ga.data.iter_mut() {
                    *o += gv;
                }
            }
            Op::CachedGrad(a, local) => {
                let gv = g.item();
                let ga = slot(grads, *a, local.shape());
                for (o, &x) in ga.data.iter_mut().zip(&local.data) {
                    *o += gv * x;
                }
            }
        }
    }

    fn backward_attention(&self, c: &AttentionCache<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (nq, e) = qv.shape();
        let nk = kv.rows;
        let ev = vv.cols;
        let (dh, dv) = (e / c.heads, ev / c.heads);
        let mut gq = Tensor::zeros(nq, e);
        let mut gk = Tensor::zeros(nk, e);
        let mut gv = Tensor::zeros(nk, ev);
        let mut ds = vec![T::zero(); nk];
        for h in 0..c.heads {
            let cols = h * dh..(h + 1) * dh;
            let vcols = h * dv..(h + 1) * dv;
            for i in 0..nq {
                let go = &g.row(i)[vcols.clone()];
                if go.iter().all(|x| *x == T::zero()) {
                    continue;
                }
                let blocked = c.mask.as_ref().map(|m| m.row(i));
                let p = &c.probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let mut weighted = T::zero();
                for j in 0..nk {
                    if blocked.is_some_and(|b| b[j]) {
                        continue;
                    }
                    let dp = dot(go, &vv.row(j)[vcols.clone()]);
                    ds[j] = dp;
                    weighted += p[j] * dp;
                }
                let qi = &qv.row(i)[cols.clone()];
                for j in 0..nk {
                    if blocked.is_some_and(|b| b[j]) {
                        continue;
                    }
                    let pj = p[j];
                    let s = pj * (ds[j] - weighted) * c.scale;
                    let kj = &kv.row(j)[cols.clone()];
                    let gqi = &mut gq.data[i * e..(i + 1) * e][cols.clone()];
                    for (o, &x) in gqi.iter_mut().zip(kj) {
                        *o += s * x;
                    }
                    let gkj = &mut gk.data[j * e..(j + 1) * e][cols.clone()];
                    for (o, &x) in gkj.iter_mut().zip(qi) {
                        *o += s * x;
                    }
                    let gvj = &mut gv.data[j * ev..(j + 1) * ev][vcols.clone()];
                    for (o, &x) in gvj.iter_mut().zip(go) {
                        *o += pj * x;
                    }
                }
            }
        }
        slot(grads, c.q, (nq, e)).add_assign(&gq);
        slot(grads, c.k, (nk, e)).add_assign(&gk);
        slot(grads, c.v, (nk, ev)).add_assign(&gv);
    }
}

fn slot<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: (usize, usize)) -> &mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal loss of one logit and its derivative.
pub fn focal_element<T: Real>(x: T, positive: bool, gamma: T, alpha: T) -> (T, T) {
    let p = sigmoid(x);
    let one = T::one();
    if positive {
        let ln_p = -softplus(-x);
        let w = (one - p).powf(gamma);
        let loss = -alpha * w * ln_p;
        let grad = alpha * w * (gamma * p * ln_p - (one - p));
        (loss, grad)
    } else {
        let ln_q = -softplus(x);
        let w = p.powf(gamma);
        let loss = -(one - alpha) * w * ln_q;
        let grad = (one - alpha) * w * (p - gamma * (one - p) * ln_q);
        (loss, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::build_attention_mask;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, data.to_vec())
    }

    // Central differences of a scalar function of one leaf's entries.
    fn numeric_grad(build: &dyn Fn(&mut Tape<f64>, Var) -> Var, x0: &Tensor<f64>) -> Vec<f64> {
        let eps = 1e-6;
        (0..x0.len())
            .map(|i| {
                let mut xp = x0.clone();
                xp.data[i] += eps;
                let mut xm = x0.clone();
                xm.data[i] -= eps;
                let mut tp = Tape::new();
                let vp = tp.leaf(xp);
                let op = build(&mut tp, vp);
                let mut tm = Tape::new();
                let vm = tm.leaf(xm);
                let om = build(&mut tm, vm);
                (tp.value(op).item() - tm.value(om).item()) / (2.0 * eps)
            })
            .collect()
    }

    fn check(build: &dyn Fn(&mut Tape<f64>, Var) -> Var, x0: Tensor<f64>) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let out = build(&mut tape, x);
        let grads = tape.backward(out);
        let analytic = grads.get_or_zeros(x, x0.shape());
        let numeric = numeric_grad(build, &x0);
        for (a, n) in analytic.data.iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn square_probe() {
        let mut tape = Tape::new();
        let x = tape.scalar(3.0);
        let y = tape.mul(x, x);
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn elementwise_ops() {
        let x0 = t(2, 3, &[0.3, -1.2, 2.0, 0.7, -0.1, 1.5]);
        check(&|tp, x| { let a = tp.silu(x); tp.sum(a) }, x0.clone());
        check(&|tp, x| { let a = tp.sigmoid(x); let b = tp.mul(a, x); tp.sum(b) }, x0.clone());
        check(&|tp, x| { let a = tp.exp(x); let b = tp.scale(a, 0.3); let c = tp.sub(b, x); tp.sum(c) }, x0);
    }

    #[test]
    fn matmul_and_broadcast() {
        let w = t(3, 2, &[0.5, -0.2, 0.1, 0.9, -0.7, 0.3]);
        let x0 = t(2, 3, &[0.3, -1.2, 2.0, 0.7, -0.1, 1.5]);
        check(
            &move |tp, x| {
                let wv = tp.leaf(w.clone());
                let b = tp.leaf(t(1, 2, &[0.1, -0.3]));
                let y = tp.matmul(x, wv);
                let y = tp.add_row(y, b);
                let y = tp.silu(y);
                tp.sum(y)
            },
            x0,
        );
    }

    #[test]
    fn layer_norm_grad() {
        let x0 = t(2, 4, &[0.3, -1.2, 2.0, 0.1, 0.7, -0.1, 1.5, -2.0]);
        check(
            &|tp, x| {
                let g = tp.leaf(t(1, 4, &[1.0, 0.5, -0.3, 2.0]));
                let b = tp.leaf(t(1, 4, &[0.0, 0.1, 0.2, 0.3]));
                let y = tp.layer_norm(x, g, b, 1e-5);
                let w = tp.leaf(t(2, 4, &[0.3, 0.1, -0.5, 0.2, 0.9, -0.4, 0.6, 0.05]));
                let z = tp.mul(y, w);
                tp.sum(z)
            },
            x0,
        );
    }

    #[test]
    fn attention_grad_wrt_q_k_v() {
        let base = t(3, 4, &[0.3, -1.2, 2.0, 0.1, 0.7, -0.1, 1.5, -2.0, 0.2, 0.4, -0.6, 0.8]);
        let other = t(3, 4, &[0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, -0.8, 0.9, 0.15, 0.25, -0.35]);
        let mask = Arc::new(build_attention_mask(2, &[1]));
        let w = t(3, 4, &[0.5, -0.2, 0.1, 0.9, -0.7, 0.3, 0.2, 0.2, 0.1, -0.4, 0.3, 0.6]);
        for which in 0..3 {
            let (o, m, w) = (other.clone(), mask.clone(), w.clone());
            check(
                &move |tp, x| {
                    let c = tp.leaf(o.clone());
                    let (q, k, v) = match which {
                        0 => (x, c, c),
                        1 => (c, x, c),
                        _ => (c, c, x),
                    };
                    let a = tp.attention(q, k, v, 2, Some(m.clone()));
                    let wv = tp.leaf(w.clone());
                    let z = tp.mul(a, wv);
                    tp.sum(z)
                },
                base.clone(),
            );
        }
    }

    #[test]
    fn attention_with_narrow_values() {
        let qk = t(3, 4, &[0.3, -1.2, 2.0, 0.1, 0.7, -0.1, 1.5, -2.0, 0.2, 0.4, -0.6, 0.8]);
        let v0 = t(3, 2, &[0.1, 0.2, -0.3, 0.4, -0.5, 0.6]);
        let w = t(3, 2, &[0.5, -0.2, 0.1, 0.9, -0.7, 0.3]);
        let (a, b) = (v0.clone(), w.clone());
        check(
            &move |tp, x| {
                let v = tp.leaf(a.clone());
                let o = tp.attention(x, x, v, 2, None);
                let wv = tp.leaf(b.clone());
                let z = tp.mul(o, wv);
                tp.sum(z)
            },
            qk.clone(),
        );
        check(
            &move |tp, v| {
                let x = tp.leaf(qk.clone());
                let o = tp.attention(x, x, v, 2, None);
                let wv = tp.leaf(w.clone());
                let z = tp.mul(o, wv);
                tp.sum(z)
            },
            v0,
        );
    }

    #[test]
    fn normalize_rows_grad() {
        let x0 = t(2, 3, &[0.3, -1.2, 2.0, 0.7, -0.1, 1.5]);
        check(
            &|tp, x| {
                let y = tp.normalize_rows(x);
                let w = tp.leaf(t(2, 3, &[0.3, 0.1, -0.5, 0.9, -0.4, 0.6]));
                let z = tp.mul(y, w);
                tp.sum(z)
            },
            x0,
        );
    }

    #[test]
    fn attention_rows_are_probability_vectors() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(3, 2, &[0.3, -1.2, 2.0, 0.1, 0.7, -0.1]));
        let mask = Arc::new(build_attention_mask(1, &[1, 1]));
        let a = tp.attention(x, x, x, 1, Some(mask.clone()));
        let probs = tp.attention_probs(a).unwrap();
        for i in 0..3 {
            let row = &probs[i * 3..i * 3 + 3];
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in 0..3 {
                if mask.is_blocked(i, j) {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn fully_blocked_row_outputs_zero() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let mut m = AttentionMask::open(2);
        m.set_blocked(0, 0, true);
        m.set_blocked(0, 1, true);
        let a = tp.attention(x, x, x, 1, Some(Arc::new(m)));
        assert_eq!(tp.value(a).row(0), &[0.0, 0.0]);
        let s = tp.sum(a);
        let g = tp.backward(s);
        assert!(g.get(x).unwrap().is_finite());
    }

    #[test]
    fn hand_computed_single_head_attention() {
        // One query, two keys: weights softmax([q·k0, q·k1] / sqrt(2)).
        let mut tp = Tape::new();
        let q = tp.leaf(t(1, 2, &[1.0, 0.0]));
        let k = tp.leaf(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let v = tp.leaf(t(2, 2, &[2.0, 0.0, 0.0, 4.0]));
        let a = tp.attention(q, k, v, 1, None);
        let s = 1.0 / 2f64.sqrt();
        let w0 = s.exp() / (s.exp() + 1.0);
        let out = tp.value(a);
        assert!((out.at(0, 0) - 2.0 * w0).abs() < 1e-15);
        assert!((out.at(0, 1) - 4.0 * (1.0 - w0)).abs() < 1e-15);
    }

    #[test]
    fn focal_matches_cross_entropy_at_gamma_zero() {
        let (l, _) = focal_element(0.0f64, true, 0.0, 1.0);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let (l, _) = focal_element(20.0f64, true, 2.0, 0.25);
        assert!(l < 1e-6);
        let (l, _) = focal_element(-20.0f64, false, 2.0, 0.25);
        assert!(l < 1e-6);
    }

    #[test]
    fn focal_and_l1_grads() {
        let targets = t(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let x0 = t(2, 3, &[0.3, -1.2, 2.0, 0.7, -0.1, 1.5]);
        check(&move |tp, x| tp.focal_loss(x, &targets, 2.0, 0.25, 2.0), x0.clone());
        let target = t(2, 3, &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        check(&move |tp, x| tp.l1_loss(x, &target, &[1.0, 0.5]), x0);
    }

    #[test]
    fn concat_and_slice() {
        let x0 = t(2, 3, &[0.3, -1.2, 2.0, 0.7, -0.1, 1.5]);
        check(
            &|tp, x| {
                let a = tp.slice_cols(x, 1, 2);
                let b = tp.slice_rows(x, 1, 1);
                let c = tp.concat_cols(&[a, x]);
                let d = tp.concat_rows(&[x, b]);
                let c2 = tp.mul(c, c);
                let d2 = tp.exp(d);
                let s1 = tp.sum(c2);
                let s2 = tp.sum(d2);
                tp.add(s1, s2)
            },
            x0,
        );
    }
}
