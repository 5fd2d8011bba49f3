//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on the
//! tape; parameters are borrowed from a [`ParamStore`] and bound lazily so a
//! parameter used several times (a shared head, say) maps to one node and its
//! gradient accumulates naturally.

use std::collections::HashMap;

use crate::matrix::Matrix;
use crate::params::{ParamId, ParamStore};
use crate::scalar::{Scalar, View, ViewMut};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const FOCAL_EPS: f64 = 1e-6;

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    AddConst { x: Var },
    AddRows { x: Var, table: Var, slots: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix<T>, rstd: Vec<T> },
    Gelu { x: Var, tanh: Matrix<T> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Clamp { x: Var, lo: T, hi: T },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Matrix<T>> },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    Im2Col { x: Var, height: usize, width: usize },
    Reparam { mu: Var, log_var: Var, eps: Matrix<T> },
    Kl { mu: Var, log_var: Var },
    Focal { pred: Var, target: Matrix<T> },
    Giou { pred: Var, gt: [T; 4] },
    L1 { pred: Var, gt: Matrix<T> },
    Sum { x: Var },
}

struct Node<T> {
    op: Op<T>,
    value: Option<Matrix<T>>,
}

pub struct Tape<'p, T: Scalar> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every bound parameter (zeros when it had no influence).
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<(ParamId, Matrix<T>)> {
        let mut out: Vec<(ParamId, Matrix<T>)> = self
            .params
            .iter()
            .map(|&(id, var)| {
                let g = self.grads[var.0].clone().unwrap_or_else(|| {
                    let (r, c) = store.value(id).shape();
                    Matrix::zeros(r, c)
                });
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self { store: None, nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self { store: Some(store), nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.expect("parameter store").value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(Op::Leaf, m)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "tape has no parameter store");
        self.nodes.push(Node { op: Op::Param(id), value: None });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// Per-head attention probabilities recorded by [`Tape::attention`].
    pub fn attention_probs(&self, v: Var) -> Option<&[Matrix<T>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul { a, b, trans_b: false }, out)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(Op::MatMul { a, b, trans_b: true }, out)
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.shape(), (1, xv.cols()), "bias shape");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.as_slice()) {
                *o += b;
            }
        }
        self.push(Op::AddBias { x, bias }, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add { a, b }, out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul { a, b }, out)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(Op::Scale { x, s }, out)
    }

    pub fn add_const(&mut self, x: Var, c: &Matrix<T>) -> Var {
        let out = self.value(x).zip_map(c, |a, b| a + b);
        self.push(Op::AddConst { x }, out)
    }

    /// `x[i] + table[slots[i]]`: a gathered positional embedding.
    pub fn add_rows(&mut self, x: Var, table: Var, slots: &[usize]) -> Var {
        let (xv, tv) = (self.value(x), self.value(table));
        assert_eq!(xv.rows(), slots.len(), "add_rows: one slot per row");
        assert_eq!(xv.cols(), tv.cols(), "add_rows: width");
        let mut out = xv.clone();
        for (r, &s) in slots.iter().enumerate() {
            for (o, &t) in out.row_mut(r).iter_mut().zip(tv.row(s)) {
                *o += t;
            }
        }
        self.push(Op::AddRows { x, table, slots: slots.to_vec() }, out)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        let n = T::from_usize(cols).unwrap();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * g.as_slice()[c] + b.as_slice()[c]);
            }
        }
        self.push(Op::LayerNorm { x, gamma, beta, xhat, rstd }, out)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tanh = self.value(x).map(gelu_tanh);
        let out = self.value(x).zip_map(&tanh, |v, t| T::lit(0.5) * v * (T::one() + t));
        self.push(Op::Gelu { x, tanh }, out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(Op::Relu { x }, out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid { x }, out)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(Op::Clamp { x, lo, hi }, out)
    }

    /// Multi-head scaled dot-product attention on already projected inputs.
    ///
    /// `q` is `Nq×d`, `k` and `v` are `Nk×d`; head `h` uses columns
    /// `h·d/heads .. (h+1)·d/heads`. Output is `Nq×d` with heads side by side.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = qv.shape();
        let nk = kv.rows();
        assert_eq!(kv.cols(), d, "attention: key width");
        assert_eq!(vv.shape(), (nk, d), "attention: value shape");
        assert!(heads > 0 && d % heads == 0, "attention: {d} not divisible by {heads} heads");
        assert!(nk > 0, "attention: empty key set");
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut out = Matrix::zeros(nq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = Matrix::zeros(nq, nk);
            T::gemm(
                nq,
                dh,
                nk,
                scale,
                View::new(qv.as_slice(), off, d, 1),
                View::new(kv.as_slice(), off, 1, d),
                T::zero(),
                p.view_mut(),
            );
            softmax_rows(&mut p);
            T::gemm(
                nq,
                nk,
                dh,
                T::one(),
                p.view(),
                View::new(vv.as_slice(), off, d, 1),
                T::zero(),
                ViewMut::new(out.as_mut_slice(), off, d, 1),
            );
            probs.push(p);
        }
        self.push(Op::Attention { q, k, v, heads, probs }, out)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let out = self.value(x).gather_rows(idx);
        self.push(Op::GatherRows { x, idx: idx.to_vec() }, out)
    }

    /// Places row `i` of `x` at row `idx[i]` of a zero matrix with `rows` rows.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), idx.len(), "scatter_rows: one index per row");
        let mut out = Matrix::zeros(rows, xv.cols());
        for (i, &dst) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(xv.row(i));
        }
        self.push(Op::ScatterRows { x, idx: idx.to_vec() }, out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows: width mismatch");
            data.extend_from_slice(pv.as_slice());
            rows += pv.rows();
        }
        self.push(Op::ConcatRows { parts: parts.to_vec() }, Matrix::from_vec(rows, cols, data))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols: height mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        self.push(Op::ConcatCols { parts: parts.to_vec() }, out)
    }

    /// 3×3 zero-padded neighbourhoods of a `height×width` grid stored as
    /// `(height·width)×C` rows; output is `(height·width)×9C`.
    pub fn im2col3x3(&mut self, x: Var, height: usize, width: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(xv.rows(), height * width, "im2col: grid size");
        let mut out = Matrix::zeros(height * width, 9 * c);
        for r in 0..height {
            for col in 0..width {
                let dst = out.row_mut(r * width + col);
                for (k, (dy, dx)) in NEIGHBOURS.iter().enumerate() {
                    let (rr, cc) = (r as isize + dy, col as isize + dx);
                    if rr < 0 || cc < 0 || rr >= height as isize || cc >= width as isize {
                        continue;
                    }
                    let src = xv.row(rr as usize * width + cc as usize);
                    dst[k * c..(k + 1) * c].copy_from_slice(src);
                }
            }
        }
        self.push(Op::Im2Col { x, height, width }, out)
    }

    /// `mu + eps ⊙ exp(log_var / 2)`; `eps` is a constant so no gradient
    /// reaches it.
    pub fn reparam(&mut self, mu: Var, log_var: Var, eps: Matrix<T>) -> Var {
        let (m, lv) = (self.value(mu), self.value(log_var));
        assert_eq!(m.shape(), lv.shape(), "reparam: mu/log_var shape");
        assert_eq!(m.shape(), eps.shape(), "reparam: noise shape");
        let half = T::lit(0.5);
        let mut out = m.clone();
        for ((o, &l), &e) in out.as_mut_slice().iter_mut().zip(lv.as_slice()).zip(eps.as_slice()) {
            *o += e * (l * half).exp();
        }
        self.push(Op::Reparam { mu, log_var, eps }, out)
    }

    /// Mean over all elements of `−½(1 + log σ² − μ² − σ²)`.
    pub fn kl_standard_normal(&mut self, mu: Var, log_var: Var) -> Var {
        let v = kl_mean(self.value(mu).as_slice(), self.value(log_var).as_slice());
        self.push(Op::Kl { mu, log_var }, Matrix::scalar(v))
    }

    /// Weighted focal loss on a probability map against a Gaussian target map.
    pub fn focal_loss(&mut self, pred: Var, target: &Matrix<T>) -> Var {
        let v = focal_value(self.value(pred).as_slice(), target.as_slice());
        self.push(Op::Focal { pred, target: target.clone() }, Matrix::scalar(v))
    }

    /// `1 − GIoU` for a `1×4` (cx, cy, w, h) prediction.
    pub fn giou_loss(&mut self, pred: Var, gt: [T; 4]) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), (1, 4), "giou: expects 1x4 cxcywh");
        let pa = [p.get(0, 0), p.get(0, 1), p.get(0, 2), p.get(0, 3)];
        let (v, _) = giou_loss_grad(pa, gt);
        self.push(Op::Giou { pred, gt }, Matrix::scalar(v))
    }

    /// Mean absolute error against a constant.
    pub fn l1_loss(&mut self, pred: Var, gt: &Matrix<T>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), gt.shape(), "l1: shape");
        let n = T::from_usize(p.len()).unwrap();
        let v = p.as_slice().iter().zip(gt.as_slice()).map(|(&a, &b)| (a - b).abs()).sum::<T>() / n;
        self.push(Op::L1 { pred, gt: gt.clone() }, Matrix::scalar(v))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push(Op::Sum { x }, Matrix::scalar(v))
    }

    /// Weighted sum of scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let s = if w == T::one() { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s),
            });
        }
        acc.expect("weighted_sum of nothing")
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort_by_key(|(id, _)| *id);
        Gradients { grads, params }
    }

    fn backprop_node(&self, i: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = av.shape();
                let n = g.cols();
                {
                    let ga = grad_slot(grads, a, av.shape());
                    // dA = dC·Bᵀ  (or dC·B when C = A·Bᵀ)
                    let bview = if trans_b { bv.view() } else { bv.view_t() };
                    T::gemm(m, n, k, T::one(), g.view(), bview, T::one(), ga.view_mut());
                }
                let gb = grad_slot(grads, b, bv.shape());
                if trans_b {
                    // dB = dCᵀ·A
                    T::gemm(n, m, k, T::one(), g.view_t(), av.view(), T::one(), gb.view_mut());
                } else {
                    // dB = Aᵀ·dC
                    T::gemm(k, m, n, T::one(), av.view_t(), g.view(), T::one(), gb.view_mut());
                }
            }
            &Op::AddBias { x, bias } => {
                accumulate(grads, x, g);
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, bias, &gb);
            }
            &Op::Add { a, b } => {
                accumulate(grads, a, g);
                accumulate(grads, b, g);
            }
            &Op::Mul { a, b } => {
                let ga = g.zip_map(self.value(b), |x, y| x * y);
                let gb = g.zip_map(self.value(a), |x, y| x * y);
                accumulate(grads, a, &ga);
                accumulate(grads, b, &gb);
            }
            &Op::Scale { x, s } => accumulate(grads, x, &g.map(|v| v * s)),
            &Op::AddConst { x } => accumulate(grads, x, g),
            Op::AddRows { x, table, slots } => {
                accumulate(grads, *x, g);
                let tv = self.value(*table);
                let gt = grad_slot(grads, *table, tv.shape());
                for (r, &s) in slots.iter().enumerate() {
                    for (o, &v) in gt.row_mut(s).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma);
                let (rows, cols) = xhat.shape();
                let n = T::from_usize(cols).unwrap();
                let mut gx = Matrix::zeros(rows, cols);
                let mut gg = Matrix::zeros(1, cols);
                let mut gbeta = Matrix::zeros(1, cols);
                let mut dxhat = vec![T::zero(); cols];
                for r in 0..rows {
                    let (gr, hr) = (g.row(r), xhat.row(r));
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for c in 0..cols {
                        let d = gr[c] * gv.as_slice()[c];
                        dxhat[c] = d;
                        mean_d += d;
                        mean_dh += d * hr[c];
                        gg.as_mut_slice()[c] += gr[c] * hr[c];
                        gbeta.as_mut_slice()[c] += gr[c];
                    }
                    mean_d /= n;
                    mean_dh /= n;
                    let out = gx.row_mut(r);
                    for c in 0..cols {
                        out[c] = rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *gamma, &gg);
                accumulate(grads, *beta, &gbeta);
            }
            Op::Gelu { x, tanh } => {
                let xv = self.value(*x);
                let data = g
                    .as_slice()
                    .iter()
                    .zip(xv.as_slice().iter().zip(tanh.as_slice()))
                    .map(|(&d, (&v, &t))| d * gelu_grad(v, t))
                    .collect();
                let gx = Matrix::from_vec(g.rows(), g.cols(), data);
                accumulate(grads, *x, &gx);
            }
            &Op::Relu { x } => {
                let gx = g.zip_map(self.value(x), |d, v| if v > T::zero() { d } else { T::zero() });
                accumulate(grads, x, &gx);
            }
            &Op::Sigmoid { x } => {
                let y = self.nodes[i].value.as_ref().unwrap();
                let gx = g.zip_map(y, |d, s| d * s * (T::one() - s));
                accumulate(grads, x, &gx);
            }
            &Op::Clamp { x, lo, hi } => {
                let gx = g.zip_map(self.value(x), |d, v| if v < lo || v > hi { T::zero() } else { d });
                accumulate(grads, x, &gx);
            }
            Op::Attention { q, k, v, heads, probs } => self.backprop_attention(*q, *k, *v, *heads, probs, g, grads),
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let gx = grad_slot(grads, *x, xv.shape());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &v) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::ScatterRows { x, idx } => accumulate(grads, *x, &g.gather_rows(idx)),
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    let slice = Matrix::from_vec(r, c, g.as_slice()[start * c..(start + r) * c].to_vec());
                    accumulate(grads, p, &slice);
                    start += r;
                }
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    let slice = Matrix::from_fn(r, c, |rr, cc| g.get(rr, off + cc));
                    accumulate(grads, p, &slice);
                    off += c;
                }
            }
            &Op::Im2Col { x, height, width } => {
                let xv = self.value(x);
                let c = xv.cols();
                let gx = grad_slot(grads, x, xv.shape());
                for r in 0..height {
                    for col in 0..width {
                        let src = g.row(r * width + col);
                        for (k, (dy, dx)) in NEIGHBOURS.iter().enumerate() {
                            let (rr, cc) = (r as isize + dy, col as isize + dx);
                            if rr < 0 || cc < 0 || rr >= height as isize || cc >= width as isize {
                                continue;
                            }
                            let dst = gx.row_mut(rr as usize * width + cc as usize);
                            for (o, &v) in dst.iter_mut().zip(&src[k * c..(k + 1) * c]) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            Op::Reparam { mu, log_var, eps } => {
                accumulate(grads, *mu, g);
                let lv = self.value(*log_var);
                let half = T::lit(0.5);
                let mut gl = g.clone();
                for ((o, &l), &e) in gl.as_mut_slice().iter_mut().zip(lv.as_slice()).zip(eps.as_slice()) {
                    *o *= e * (l * half).exp() * half;
                }
                accumulate(grads, *log_var, &gl);
            }
            &Op::Kl { mu, log_var } => {
                let up = g.value();
                let (m, lv) = (self.value(mu), self.value(log_var));
                let n = T::from_usize(m.len()).unwrap();
                let half = T::lit(0.5);
                accumulate(grads, mu, &m.map(|v| up * v / n));
                accumulate(grads, log_var, &lv.map(|l| up * half * (l.exp() - T::one()) / n));
            }
            Op::Focal { pred, target } => {
                let up = g.value();
                let pv = self.value(*pred);
                let gp = focal_grad(pv.as_slice(), target.as_slice());
                let gm = Matrix::from_vec(pv.rows(), pv.cols(), gp.into_iter().map(|v| v * up).collect());
                accumulate(grads, *pred, &gm);
            }
            Op::Giou { pred, gt } => {
                let up = g.value();
                let p = self.value(*pred);
                let pa = [p.get(0, 0), p.get(0, 1), p.get(0, 2), p.get(0, 3)];
                let (_, d) = giou_loss_grad(pa, *gt);
                accumulate(grads, *pred, &Matrix::from_vec(1, 4, d.iter().map(|&v| v * up).collect()));
            }
            Op::L1 { pred, gt } => {
                let up = g.value();
                let p = self.value(*pred);
                let n = T::from_usize(p.len()).unwrap();
                let gm = p.zip_map(gt, |a, b| up * sign(a - b) / n);
                accumulate(grads, *pred, &gm);
            }
            &Op::Sum { x } => {
                let (r, c) = self.value(x).shape();
                accumulate(grads, x, &Matrix::filled(r, c, g.value()));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[Matrix<T>],
        g: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = qv.shape();
        let nk = kv.rows();
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut gq = Matrix::zeros(nq, d);
        let mut gk = Matrix::zeros(nk, d);
        let mut gv = Matrix::zeros(nk, d);
        let mut dp = Matrix::zeros(nq, nk);
        for (h, p) in probs.iter().enumerate() {
            let off = h * dh;
            let go = View::new(g.as_slice(), off, d, 1);
            // dV_h = Pᵀ·dO_h
            T::gemm(nk, nq, dh, T::one(), p.view_t(), go, T::one(), ViewMut::new(gv.as_mut_slice(), off, d, 1));
            // dP = dO_h·V_hᵀ
            T::gemm(nq, dh, nk, T::one(), go, View::new(vv.as_slice(), off, 1, d), T::zero(), dp.view_mut());
            for r in 0..nq {
                let pr = p.row(r);
                let dr = dp.row_mut(r);
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (dv, &pv) in dr.iter_mut().zip(pr) {
                    *dv = pv * (*dv - dot);
                }
            }
            // dQ_h = scale·dS·K_h ; dK_h = scale·dSᵀ·Q_h
            T::gemm(
                nq,
                nk,
                dh,
                scale,
                dp.view(),
                View::new(kv.as_slice(), off, d, 1),
                T::one(),
                ViewMut::new(gq.as_mut_slice(), off, d, 1),
            );
            T::gemm(
                nk,
                nq,
                dh,
                scale,
                dp.view_t(),
                View::new(qv.as_slice(), off, d, 1),
                T::one(),
                ViewMut::new(gk.as_mut_slice(), off, d, 1),
            );
        }
        accumulate(grads, q, &gq);
        accumulate(grads, k, &gk);
        accumulate(grads, v, &gv);
    }
}

const NEIGHBOURS: [(isize, isize); 9] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

fn grad_slot<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, shape: (usize, usize)) -> &mut Matrix<T> {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: &Matrix<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu<T: Scalar>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + gelu_tanh(x))
}

fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    (c * (x + a * x * x * x)).tanh()
}

/// Derivative of [`gelu`] at `x` given `t = gelu_tanh(x)`.
fn gelu_grad<T: Scalar>(x: T, t: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

/// Numerically stable in-place row softmax.
pub fn softmax_rows<T: Scalar>(m: &mut Matrix<T>) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub(crate) fn kl_mean<T: Scalar>(mu: &[T], log_var: &[T]) -> T {
    assert_eq!(mu.len(), log_var.len(), "kl: shape");
    let half = T::lit(0.5);
    let total: T = mu
        .iter()
        .zip(log_var)
        .map(|(&m, &l)| -half * (T::one() + l - m * m - l.exp()))
        .sum();
    total / T::from_usize(mu.len().max(1)).unwrap()
}

const FOCAL_ALPHA: i32 = 2;
const FOCAL_BETA: i32 = 4;

/// CornerNet weighted focal loss normalized by the number of positive cells.
pub fn focal_value<T: Scalar>(pred: &[T], target: &[T]) -> T {
    assert_eq!(pred.len(), target.len(), "focal: shape");
    let eps = T::lit(FOCAL_EPS);
    let (mut loss, mut num_pos) = (T::zero(), 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        let p = p.max(eps).min(T::one() - eps);
        if t == T::one() {
            num_pos += 1;
            loss -= (T::one() - p).powi(FOCAL_ALPHA) * p.ln();
        } else {
            loss -= (T::one() - t).powi(FOCAL_BETA) * p.powi(FOCAL_ALPHA) * (T::one() - p).ln();
        }
    }
    loss / T::from_usize(num_pos.max(1)).unwrap()
}

fn focal_grad<T: Scalar>(pred: &[T], target: &[T]) -> Vec<T> {
    let eps = T::lit(FOCAL_EPS);
    let two = T::lit(2.0);
    let num_pos = target.iter().filter(|&&t| t == T::one()).count().max(1);
    let norm = T::from_usize(num_pos).unwrap();
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            if p < eps || p > T::one() - eps {
                return T::zero();
            }
            let d = if t == T::one() {
                two * (T::one() - p) * p.ln() - (T::one() - p) * (T::one() - p) / p
            } else {
                let w = (T::one() - t).powi(FOCAL_BETA);
                -w * (two * p * (T::one() - p).ln() - p * p / (T::one() - p))
            };
            d / norm
        })
        .collect()
}

/// `1 − GIoU` between (cx, cy, w, h) boxes and its gradient w.r.t. the first.
pub fn giou_loss_grad<T: Scalar>(p: [T; 4], g: [T; 4]) -> (T, [T; 4]) {
    let half = T::lit(0.5);
    let zero = T::zero();
    let (pw, ph) = (p[2].max(zero), p[3].max(zero));
    let (gw, gh) = (g[2].max(zero), g[3].max(zero));
    let (px1, px2) = (p[0] - half * pw, p[0] + half * pw);
    let (py1, py2) = (p[1] - half * ph, p[1] + half * ph);
    let (gx1, gx2) = (g[0] - half * gw, g[0] + half * gw);
    let (gy1, gy2) = (g[1] - half * gh, g[1] + half * gh);

    let iw_raw = px2.min(gx2) - px1.max(gx1);
    let ih_raw = py2.min(gy2) - py1.max(gy1);
    let (iw, ih) = (iw_raw.max(zero), ih_raw.max(zero));
    let inter = iw * ih;
    let (ap, ag) = (pw * ph, gw * gh);
    let union = ap + ag - inter;
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let enclose = cw * ch;
    if union <= zero || enclose <= zero {
        return (T::one(), [zero; 4]);
    }
    let loss = T::lit(2.0) - inter / union - union / enclose;

    // reverse pass
    let g_c = union / (enclose * enclose);
    let g_u = inter / (union * union) - T::one() / enclose;
    let g_i = -T::one() / union - g_u;
    let g_ap = g_u;
    let (g_iw, g_ih) = (g_i * ih, g_i * iw);
    let (g_cw, g_ch) = (g_c * ch, g_c * cw);
    let (mut g_px1, mut g_px2, mut g_py1, mut g_py2) = (zero, zero, zero, zero);
    if iw_raw > zero {
        if px2 <= gx2 {
            g_px2 += g_iw;
        }
        if px1 >= gx1 {
            g_px1 -= g_iw;
        }
    }
    if ih_raw > zero {
        if py2 <= gy2 {
            g_py2 += g_ih;
        }
        if py1 >= gy1 {
            g_py1 -= g_ih;
        }
    }
    if px2 >= gx2 {
        g_px2 += g_cw;
    }
    if px1 <= gx1 {
        g_px1 -= g_cw;
    }
    if py2 >= gy2 {
        g_py2 += g_ch;
    }
    if py1 <= gy1 {
        g_py1 -= g_ch;
    }
    let mut g_w = g_ap * ph + half * (g_px2 - g_px1);
    let mut g_h = g_ap * pw + half * (g_py2 - g_py1);
    if p[2] < zero {
        g_w = zero;
    }
    if p[3] < zero {
        g_h = zero;
    }
    (loss, [g_px1 + g_px2, g_py1 + g_py2, g_w, g_h])
}
