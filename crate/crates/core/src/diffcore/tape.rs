//! Reverse-mode differentiation over a linear record of primitive
//! applications.
//!
//! Nodes are appended in evaluation order, so the record is already a
//! topological order and the backward pass is a single reverse sweep.

use std::sync::Arc;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{dot, norm, Scalar, Tensor};

/// Additive score applied to masked attention keys.
pub const MASK_NEG: f64 = -1e9;
/// Layer-norm variance guard.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Norm guard shared by cosine similarity and L2 normalization.
pub const NORM_EPS: f64 = 1e-8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    SegmentMean {
        x: Var,
        seg_len: usize,
        mask: Option<Vec<bool>>,
        counts: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows {
        src: Var,
        idx: Vec<Option<usize>>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Cosine {
        a: Var,
        b: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<T>,
    },
    BiTriplet {
        sim: Var,
        margin: T,
    },
    Dropout {
        x: Var,
        scale: Vec<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation record for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn c<T: Scalar>(x: f64) -> T {
    T::from_f64(x)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push_arc(Arc::new(t), Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_arc(Arc::new(t), Op::Leaf, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push_arc(store.shared(id), Op::Leaf, true);
        self.param_vars.push((id, v));
        v
    }

    /// Routes later `param(.., id)` lookups to an existing node.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.param_vars.retain(|(p, _)| *p != id);
        self.param_vars.push((id, v));
    }

    /// Parameters that took part in this forward pass.
    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.param_vars
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shapes");
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        let m = x.cols();
        assert_eq!(r.len(), m, "add_row width");
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(m) {
            for (o, &b) in chunk.iter_mut().zip(r.data()) {
                *o = *o + b;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data);
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shapes");
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Sum of every element, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let h = self.matmul(x, weight);
        self.add_row(h, bias)
    }

    /// Mean over consecutive row segments of length `seg_len`, optionally
    /// restricted to rows whose mask entry is `true`. A segment with no
    /// selected rows yields zeros.
    pub fn segment_mean(&mut self, x: Var, seg_len: usize, mask: Option<Vec<bool>>) -> Var {
        let t = self.value(x);
        let (rows, d) = (t.rows(), t.cols());
        assert!(
            seg_len > 0 && rows % seg_len == 0,
            "segment length {seg_len} vs {rows} rows"
        );
        if let Some(m) = &mask {
            assert_eq!(m.len(), rows, "mask length");
        }
        let n = rows / seg_len;
        let mut out = vec![T::zero(); n * d];
        let mut counts = vec![T::zero(); n];
        for s in 0..n {
            let o = &mut out[s * d..(s + 1) * d];
            let mut count = 0usize;
            for r in s * seg_len..(s + 1) * seg_len {
                if mask.as_ref().is_some_and(|m| !m[r]) {
                    continue;
                }
                count += 1;
                for (ov, &xv) in o.iter_mut().zip(t.row(r)) {
                    *ov = *ov + xv;
                }
            }
            let cnt = c::<T>(count as f64);
            counts[s] = cnt;
            if count > 0 {
                o.iter_mut().for_each(|v| *v = *v / cnt);
            }
        }
        let out = Tensor::matrix(n, d, out);
        self.push(
            out,
            Op::SegmentMean {
                x,
                seg_len,
                mask,
                counts,
            },
            &[x],
        )
    }

    /// Mean over rows (axis 0) with an optional row mask.
    pub fn mean_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Var {
        let rows = self.value(x).rows();
        self.segment_mean(x, rows, mask)
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols row counts");
                data.extend_from_slice(t.row(r));
            }
        }
        let out = Tensor::matrix(rows, width, data);
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Concatenation along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows widths");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row gather; `None` produces a zero row. With all-`Some` indices over
    /// an embedding table this is the embedding lookup.
    pub fn select_rows(&mut self, src: Var, idx: Vec<Option<usize>>) -> Var {
        let t = self.value(src);
        let d = t.cols();
        let mut data = vec![T::zero(); idx.len() * d];
        for (i, ix) in idx.iter().enumerate() {
            if let Some(j) = ix {
                data[i * d..(i + 1) * d].copy_from_slice(t.row(*j));
            }
        }
        let out = Tensor::matrix(idx.len(), d, data);
        self.push(out, Op::SelectRows { src, idx }, &[src])
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        self.select_rows(table, ids.iter().map(|&i| Some(i)).collect())
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let t = self.value(x);
        assert!(start + width <= t.cols(), "slice_cols out of range");
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + width]);
        }
        let out = Tensor::matrix(rows, width, data);
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), data);
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let t = self.value(x);
        let d = t.cols();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        assert_eq!(g.len(), d, "layer_norm gain width");
        assert_eq!(b.len(), d, "layer_norm bias width");
        let eps = c::<T>(LAYER_NORM_EPS);
        let inv_d = c::<T>(1.0 / d as f64);
        let mut xhat = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let u = c::<T>(GELU_C) * (v + c::<T>(GELU_A) * v * v * v);
            c::<T>(0.5) * v * (T::one() + u.tanh())
        });
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Row-wise `x / max(‖x‖, eps)`.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let eps = c::<T>(NORM_EPS);
        let norms: Vec<T> = (0..t.rows()).map(|r| norm(t.row(r))).collect();
        let d = t.cols();
        let mut data = t.data().to_vec();
        for (row, &n) in data.chunks_mut(d).zip(&norms) {
            let n = n.max(eps);
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        let out = Tensor::new(t.shape().to_vec(), data);
        self.push(out, Op::L2Normalize { x, norms }, &[x])
    }

    /// Row-wise cosine similarity; returns an `n x 1` column.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "cosine shapes");
        let vals: Vec<T> = (0..x.rows())
            .map(|r| cosine_similarity(x.row(r), y.row(r)))
            .collect();
        let n = vals.len();
        self.push(Tensor::matrix(n, 1, vals), Op::Cosine { a, b }, &[a, b])
    }

    /// Scaled dot-product attention for `q`, `k`, `v` laid out as
    /// `n_seq * seq_len` rows of width `d`, split into `heads` column
    /// blocks. Keys whose `key_mask` entry is `false` receive an additive
    /// `MASK_NEG` score.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = (qt.rows(), qt.cols());
        assert_eq!(kt.shape(), qt.shape(), "attention k shape");
        assert_eq!(vt.shape(), qt.shape(), "attention v shape");
        assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
        assert!(
            seq_len > 0 && rows % seq_len == 0,
            "attention sequence layout"
        );
        let n_seq = rows / seq_len;
        let dh = d / heads;
        let scale = c::<T>(1.0 / (dh as f64).sqrt());
        let neg = c::<T>(MASK_NEG);
        let mut probs = vec![T::zero(); n_seq * heads * seq_len * seq_len];
        let mut out = vec![T::zero(); rows * d];
        let mut scores = vec![T::zero(); seq_len];
        for s in 0..n_seq {
            let base = s * seq_len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seq_len {
                    let qi = &qt.row(base + i)[cols.clone()];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let kj = &kt.row(base + j)[cols.clone()];
                        *sc = dot(qi, kj) * scale;
                        if key_mask.is_some_and(|m| !m[base + j]) {
                            *sc = *sc + neg;
                        }
                    }
                    softmax_in_place(&mut scores);
                    let p_off = ((s * heads + h) * seq_len + i) * seq_len;
                    probs[p_off..p_off + seq_len].copy_from_slice(&scores);
                    let o = &mut out[(base + i) * d + h * dh..(base + i) * d + (h + 1) * dh];
                    for (j, &p) in scores.iter().enumerate() {
                        let vj = &vt.row(base + j)[cols.clone()];
                        for (ov, &vv) in o.iter_mut().zip(vj) {
                            *ov = *ov + p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(rows, d, out);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// In-batch bidirectional triplet hinge over a similarity matrix
    /// `sim[i][j] = c(a_i, b_j)`. For every anchor `i` the two hinge terms
    /// are averaged over the `B - 1` negatives `j != i`, then averaged over
    /// anchors.
    pub fn bi_triplet(&mut self, sim: Var, margin: T) -> Var {
        let s = self.value(sim);
        let b = s.rows();
        assert_eq!(s.cols(), b, "similarity matrix must be square");
        assert!(b >= 2, "need at least two samples for in-batch negatives");
        let inv = c::<T>(1.0 / (b as f64 * (b - 1) as f64));
        let mut total = T::zero();
        for i in 0..b {
            let pos = s.get(i, i);
            for j in (0..b).filter(|&j| j != i) {
                total = total + (s.get(i, j) - pos + margin).max(T::zero());
                total = total + (s.get(j, i) - pos + margin).max(T::zero());
            }
        }
        self.push(
            Tensor::scalar(total * inv),
            Op::BiTriplet { sim, margin },
            &[sim],
        )
    }

    /// Inverted dropout. `rate == 0` returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let t = self.value(x);
        let scale: Vec<T> = (0..t.len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    c::<T>(1.0 / keep)
                } else {
                    T::zero()
                }
            })
            .collect();
        let data = t.data().iter().zip(&scale).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data);
        self.push(out, Op::Dropout { x, scale }, &[x])
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(
            self.value(output).len(),
            1,
            "backward needs a scalar output, got shape {:?}",
            self.value(output).shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.matmul_t(val(*b)));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, val(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.matmul(val(*b)));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, g.t_matmul(val(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if wants(*row) {
                    let m = g.cols();
                    let mut acc = vec![T::zero(); m];
                    for r in 0..g.rows() {
                        for (o, &x) in acc.iter_mut().zip(g.row(r)) {
                            *o = *o + x;
                        }
                    }
                    let shape = val(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, acc));
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if wants(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&p, &q)| p * q)
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d));
                }
                if wants(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&p, &q)| p * q)
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(y.shape().to_vec(), d));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), gv));
            }
            Op::SegmentMean {
                x,
                seg_len,
                mask,
                counts,
            } => {
                let xt = val(*x);
                let d = xt.cols();
                let mut dx = vec![T::zero(); xt.len()];
                for r in 0..xt.rows() {
                    if mask.as_ref().is_some_and(|m| !m[r]) {
                        continue;
                    }
                    let s = r / seg_len;
                    let cnt = counts[s];
                    for (o, &gv) in dx[r * d..(r + 1) * d].iter_mut().zip(g.row(s)) {
                        *o = gv / cnt;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let t = val(p);
                    let w = t.cols();
                    if wants(p) {
                        let mut d = Vec::with_capacity(t.len());
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[start..start + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(t.shape().to_vec(), d));
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = val(p);
                    let n = t.len();
                    if wants(p) {
                        let d = g.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, p, Tensor::new(t.shape().to_vec(), d));
                    }
                    offset += n;
                }
            }
            Op::SelectRows { src, idx } => {
                let st = val(*src);
                let d = st.cols();
                let mut ds = Tensor::zeros(st.shape());
                for (i, ix) in idx.iter().enumerate() {
                    if let Some(j) = ix {
                        for (o, &gv) in ds.row_mut(*j).iter_mut().zip(g.row(i)) {
                            *o = *o + gv;
                        }
                    }
                }
                debug_assert_eq!(ds.cols(), d);
                self.accumulate(grads, *src, ds);
            }
            Op::SliceCols { x, start } => {
                let xt = val(*x);
                let w = g.cols();
                let mut dx = Tensor::zeros(xt.shape());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - s)));
                }
                debug_assert_eq!(dx.len(), y.rows() * d);
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let xt = val(*x);
                let d = xt.cols();
                let gn = val(*gain).data();
                let inv_d = c::<T>(1.0 / d as f64);
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let mut dx = vec![T::zero(); xt.len()];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..xt.rows() {
                    let gr = g.row(r);
                    let xh = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dgain[j] = dgain[j] + gr[j] * xh[j];
                        dbias[j] = dbias[j] + gr[j];
                        dxhat[j] = gr[j] * gn[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
                    let m2 = dot(&dxhat, xh) * inv_d;
                    for j in 0..d {
                        dx[r * d + j] = inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx));
                let gs = val(*gain).shape().to_vec();
                self.accumulate(grads, *gain, Tensor::new(gs, dgain));
                let bs = val(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::new(bs, dbias));
            }
            Op::Gelu(x) => {
                let xt = val(*x);
                let d = xt
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let u = c::<T>(GELU_C) * (v + c::<T>(GELU_A) * v * v * v);
                        let t = u.tanh();
                        let du = c::<T>(GELU_C) * (T::one() + c::<T>(3.0 * GELU_A) * v * v);
                        let deriv = c::<T>(0.5) * (T::one() + t)
                            + c::<T>(0.5) * v * (T::one() - t * t) * du;
                        gv * deriv
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), d));
            }
            Op::Relu(x) => {
                let xt = val(*x);
                let d = xt
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), d));
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let eps = c::<T>(NORM_EPS);
                let d = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (r, &n) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    if n > eps {
                        let s = dot(yr, gr);
                        dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * s) / n));
                    } else {
                        dx.extend(gr.iter().map(|&gv| gv / eps));
                    }
                }
                debug_assert_eq!(dx.len(), y.rows() * d);
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::Cosine { a, b } => {
                let (at, bt) = (val(*a), val(*b));
                let eps = c::<T>(NORM_EPS);
                let mut da = Vec::with_capacity(at.len());
                let mut db = Vec::with_capacity(bt.len());
                for r in 0..at.rows() {
                    let (u, v) = (at.row(r), bt.row(r));
                    let gv = g.get(r, 0);
                    let (nu, nv) = (norm(u), norm(v));
                    let denom = nu * nv;
                    if denom > eps {
                        let cs = dot(u, v) / denom;
                        da.extend(
                            u.iter()
                                .zip(v)
                                .map(|(&x, &y)| gv * (y / denom - cs * x / (nu * nu))),
                        );
                        db.extend(
                            u.iter()
                                .zip(v)
                                .map(|(&x, &y)| gv * (x / denom - cs * y / (nv * nv))),
                        );
                    } else {
                        da.extend(v.iter().map(|&y| gv * y / eps));
                        db.extend(u.iter().map(|&x| gv * x / eps));
                    }
                }
                self.accumulate(grads, *a, Tensor::new(at.shape().to_vec(), da));
                self.accumulate(grads, *b, Tensor::new(bt.shape().to_vec(), db));
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (qt, kt, vt) = (val(*q), val(*k), val(*v));
                let (rows, d) = (qt.rows(), qt.cols());
                let (l, heads) = (*seq_len, *heads);
                let dh = d / heads;
                let scale = c::<T>(1.0 / (dh as f64).sqrt());
                let mut dq = vec![T::zero(); rows * d];
                let mut dk = vec![T::zero(); rows * d];
                let mut dv = vec![T::zero(); rows * d];
                let mut dp = vec![T::zero(); l];
                for s in 0..rows / l {
                    let base = s * l;
                    for h in 0..heads {
                        let c0 = h * dh;
                        for i in 0..l {
                            let p_off = ((s * heads + h) * l + i) * l;
                            let p = &probs[p_off..p_off + l];
                            let gi = &g.row(base + i)[c0..c0 + dh];
                            for j in 0..l {
                                let vj = &vt.row(base + j)[c0..c0 + dh];
                                dp[j] = dot(gi, vj);
                                let dvj = &mut dv[(base + j) * d + c0..(base + j) * d + c0 + dh];
                                for (o, &gv) in dvj.iter_mut().zip(gi) {
                                    *o = *o + p[j] * gv;
                                }
                            }
                            let s_dot = dot(p, &dp);
                            let qi = &qt.row(base + i)[c0..c0 + dh];
                            for j in 0..l {
                                let ds = p[j] * (dp[j] - s_dot) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let kj = &kt.row(base + j)[c0..c0 + dh];
                                let dqi = &mut dq[(base + i) * d + c0..(base + i) * d + c0 + dh];
                                for (o, &kv) in dqi.iter_mut().zip(kj) {
                                    *o = *o + ds * kv;
                                }
                                let dkj = &mut dk[(base + j) * d + c0..(base + j) * d + c0 + dh];
                                for (o, &qv) in dkj.iter_mut().zip(qi) {
                                    *o = *o + ds * qv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, Tensor::new(qt.shape().to_vec(), dq));
                self.accumulate(grads, *k, Tensor::new(kt.shape().to_vec(), dk));
                self.accumulate(grads, *v, Tensor::new(vt.shape().to_vec(), dv));
            }
            Op::BiTriplet { sim, margin } => {
                let s = val(*sim);
                let b = s.rows();
                let gv = g.item() * c::<T>(1.0 / (b as f64 * (b - 1) as f64));
                let mut ds = Tensor::zeros(s.shape());
                let w = ds.cols();
                let d = ds.data_mut();
                for i in 0..b {
                    let pos = s.get(i, i);
                    for j in (0..b).filter(|&j| j != i) {
                        if s.get(i, j) - pos + *margin > T::zero() {
                            d[i * w + j] = d[i * w + j] + gv;
                            d[i * w + i] = d[i * w + i] - gv;
                        }
                        if s.get(j, i) - pos + *margin > T::zero() {
                            d[j * w + i] = d[j * w + i] + gv;
                            d[i * w + i] = d[i * w + i] - gv;
                        }
                    }
                }
                self.accumulate(grads, *sim, ds);
            }
            Op::Dropout { x, scale } => {
                let d = g.data().iter().zip(scale).map(|(&a, &m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d));
            }
        }
    }
}

/// Result of [`Tape::backward`]; holds gradients for leaf nodes.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Moves out the gradients of every bound parameter that received one.
    pub fn into_param_grads(mut self, tape: &Tape<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = tape
            .bound_params()
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].take().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / sum);
}

/// `⟨u,v⟩ / max(‖u‖‖v‖, eps)`.
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> T {
    let denom = (norm(u) * norm(v)).max(c::<T>(NORM_EPS));
    dot(u, v) / denom
}
