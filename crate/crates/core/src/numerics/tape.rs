use rand::Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows { weights: Vec<T>, v: Var },
    Sigmoid(Var),
    DivScalar(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    MaskMul { x: Var, mask: Vec<T> },
    Gather { x: Var, idx: Vec<usize> },
    Concat(Vec<Var>),
    Transpose(Var),
    SegmentMean { x: Var, group: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T> },
    Attention(Box<AttentionSaved<T>>),
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    seq: usize,
    heads: usize,
    /// Softmax weights, laid out [batch][head][query][key].
    probs: Vec<T>,
    /// Inverted-dropout multipliers with the same layout, if dropout ran.
    keep: Option<Vec<T>>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a dynamic computation graph for reverse-mode differentiation.
///
/// Every op checks its output for NaN/Inf; the first offending op is kept and
/// reported by [`Tape::check_finite`].
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    non_finite: Option<&'static str>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            non_finite: None,
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

    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite(op.to_string())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(name);
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, "leaf")
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let [ar, ac] = self.shape(a);
        let [br, bc] = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul: inner dimensions {k} and {k2} differ");
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, T::zero(), &mut out);
        let value = Tensor::new(m, n, out).unwrap();
        self.push(value, Op::MatMul { a, b, ta, tb }, "matmul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, name: &str) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "{name}: shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.rows(), x.cols(), data).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let x = self.value(a);
        Tensor::new(x.rows(), x.cols(), x.data().iter().map(|&p| f(p)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_map(a, b, |p, q| p + q, "add");
        self.push(value, Op::Add(a, b), "add")
    }

    /// Adds a 1×d row to every row of an n×d tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let [_, d] = self.shape(x);
        assert_eq!(self.shape(bias), [1, d], "add_row: bias shape");
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(d) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        self.push(value, Op::AddRow(x, bias), "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_map(a, b, |p, q| p * q, "mul");
        self.push(value, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.map(a, |p| p * c);
        self.push(value, Op::Scale(a, c), "scale")
    }

    /// Outer product of constant weights (length k) with a 1×d row: row i is
    /// `weights[i] * v`.
    pub fn scale_rows(&mut self, weights: Vec<T>, v: Var) -> Var {
        let [r, d] = self.shape(v);
        assert_eq!(r, 1, "scale_rows: v must be a row vector");
        let row = self.value(v).data().to_vec();
        let mut data = Vec::with_capacity(weights.len() * d);
        for &w in &weights {
            data.extend(row.iter().map(|&x| w * x));
        }
        let value = Tensor::new(weights.len(), d, data).unwrap();
        self.push(value, Op::ScaleRows { weights, v }, "scale_rows")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map(a, |p| T::one() / (T::one() + (-p).exp()));
        self.push(value, Op::Sigmoid(a), "sigmoid")
    }

    /// Divides every entry of `a` by the 1×1 value `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), [1, 1], "div_scalar: divisor must be 1x1");
        let d = self.value(s).item();
        let value = self.map(a, |p| p / d);
        self.push(value, Op::DivScalar(a, s), "div_scalar")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        let value = self.map(a, |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a), "gelu")
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for row in value.data_mut().chunks_mut(x.cols()) {
            softmax_in_place(row);
        }
        self.push(value, Op::Softmax(a), "softmax")
    }

    /// Row-wise layer norm with affine `gamma`/`beta` (both 1×d), eps 1e-5.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let [n, d] = self.shape(x);
        assert_eq!(self.shape(gamma), [1, d], "layer_norm: gamma shape");
        assert_eq!(self.shape(beta), [1, d], "layer_norm: beta shape");
        let eps = T::of(LN_EPS);
        let dn = T::of(d as f64);
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(n, d, out).unwrap();
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, "layer_norm")
    }

    /// Multiplies by a constant mask of the same size as `x`.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<T>) -> Var {
        assert_eq!(mask.len(), self.value(x).len(), "mask_mul: mask size");
        let value = {
            let v = self.value(x);
            let data = v.data().iter().zip(&mask).map(|(&p, &m)| p * m).collect();
            Tensor::new(v.rows(), v.cols(), data).unwrap()
        };
        self.push(value, Op::MaskMul { x, mask }, "mask_mul")
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.mask_mul(x, mask)
    }

    /// Stochastic depth: rows come in consecutive groups of `group` (one
    /// group per sample); each group is zeroed with probability `p`, and
    /// kept groups are scaled by `1 / (1 - p)`.
    pub fn drop_path<R: Rng + ?Sized>(&mut self, x: Var, p: f64, group: usize, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let [n, d] = self.shape(x);
        assert_eq!(n % group, 0, "drop_path: rows not divisible by group");
        let keep = T::of(1.0 / (1.0 - p));
        let mut mask = Vec::with_capacity(n * d);
        for _ in 0..n / group {
            let m = if rng.random::<f64>() < p { T::zero() } else { keep };
            mask.extend(std::iter::repeat_n(m, group * d));
        }
        self.mask_mul(x, mask)
    }

    /// Selects rows of `x` by index (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let src = self.value(x);
        let d = src.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            assert!(i < src.rows(), "gather_rows: index {i} out of {} rows", src.rows());
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(idx.len(), d, data).unwrap();
        self.push(value, Op::Gather { x, idx }, "gather_rows")
    }

    /// Stacks tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let d = self.shape(parts[0])[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), d, "concat_rows: column mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(rows, d, data).unwrap();
        self.push(value, Op::Concat(parts.to_vec()), "concat_rows")
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), "transpose")
    }

    /// Means over consecutive groups of `group` rows: (n·g)×d → n×d.
    pub fn segment_mean(&mut self, x: Var, group: usize) -> Var {
        let [n, d] = self.shape(x);
        assert!(group > 0 && n % group == 0, "segment_mean: bad group");
        let src = self.value(x).data();
        let inv = T::one() / T::of(group as f64);
        let mut out = vec![T::zero(); (n / group) * d];
        for r in 0..n {
            let o = (r / group) * d;
            for j in 0..d {
                out[o + j] += src[r * d + j];
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(n / group, d, out).unwrap();
        self.push(value, Op::SegmentMean { x, group }, "segment_mean")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Sum over rows of `-log softmax(logits)[target]`; rows with a `None`
    /// target contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let x = self.value(logits);
        let [n, k] = x.shape();
        assert_eq!(targets.len(), n, "cross_entropy: one target per row");
        let mut probs = x.data().to_vec();
        let mut total = T::zero();
        for (i, row) in probs.chunks_mut(k).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            if let Some(t) = targets[i] {
                assert!(t < k, "cross_entropy: target {t} out of {k} classes");
                total += lse - row[t];
            }
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        self.push(Tensor::scalar(total), Op::CrossEntropy { logits, targets, probs }, "cross_entropy")
    }

    /// Mean cross entropy over non-ignored rows; 0 (with zero gradient) when
    /// every row is ignored.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return self.leaf(Tensor::scalar(T::zero()));
        }
        let total = self.cross_entropy(logits, targets);
        self.scale(total, T::one() / T::of(count as f64))
    }

    /// Multi-head scaled dot-product self-attention without masking.
    ///
    /// `q`, `k`, `v` are (batch·seq)×d with each sample's `seq` rows
    /// consecutive; heads split the columns evenly. `dropout` applies
    /// inverted dropout to the attention weights.
    pub fn attention<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        dropout: Option<(f64, &mut R)>,
    ) -> Var {
        let [n, d] = self.shape(q);
        assert_eq!(self.shape(k), [n, d], "attention: k shape");
        assert_eq!(self.shape(v), [n, d], "attention: v shape");
        assert!(seq > 0 && n % seq == 0, "attention: rows not divisible by seq");
        assert!(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
        let batch = n / seq;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut keep = match &dropout {
            Some((p, _)) if *p > 0.0 => Some(vec![T::one(); probs.len()]),
            _ => None,
        };
        if let (Some(keep), Some((p, rng))) = (keep.as_mut(), dropout) {
            let kept = T::of(1.0 / (1.0 - p));
            for m in keep.iter_mut() {
                *m = if rng.random::<f64>() < p { T::zero() } else { kept };
            }
        }
        let mut out = vec![T::zero(); n * d];
        for b in 0..batch {
            for h in 0..heads {
                let base = ((b * heads) + h) * seq * seq;
                let col = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + col..][..dh];
                    let row = &mut probs[base + i * seq..base + (i + 1) * seq];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kd[(b * seq + j) * d + col..][..dh];
                        *s = dot(qi, kj) * scale;
                    }
                    softmax_in_place(row);
                    let o = &mut out[(b * seq + i) * d + col..][..dh];
                    for j in 0..seq {
                        let mut w = row[j];
                        if let Some(keep) = &keep {
                            w *= keep[base + i * seq + j];
                        }
                        let vj = &vd[(b * seq + j) * d + col..][..dh];
                        for c in 0..dh {
                            o[c] += w * vj[c];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(n, d, out).unwrap();
        let saved = AttentionSaved {
            q,
            k,
            v,
            seq,
            heads,
            probs,
            keep,
        };
        self.push(value, Op::Attention(Box::new(saved)), "attention")
    }

    /// Inputs of the op that produced `v`, in argument order.
    pub fn operands(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) | Op::DivScalar(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::ScaleRows { v: a, .. }
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::MaskMul { x: a, .. }
            | Op::Gather { x: a, .. }
            | Op::Transpose(a)
            | Op::SegmentMean { x: a, .. }
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::CrossEntropy { logits: a, .. } => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(parts) => parts.clone(),
            Op::Attention(s) => vec![s.q, s.k, s.v],
        }
    }

    /// Reverse pass from a 1×1 output.
    pub fn backward(&self, output: Var) -> Grads<T> {
        assert_eq!(self.shape(output), [1, 1], "backward: output must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let [m, n] = g.shape();
                let k = if *ta { av.rows() } else { av.cols() };
                let mut da = vec![T::zero(); av.len()];
                if *ta {
                    T::gemm(k, n, m, bv.data(), *tb, g.data(), true, T::zero(), &mut da);
                } else {
                    T::gemm(m, n, k, g.data(), false, bv.data(), !*tb, T::zero(), &mut da);
                }
                let mut db = vec![T::zero(); bv.len()];
                if *tb {
                    T::gemm(n, m, k, g.data(), true, av.data(), *ta, T::zero(), &mut db);
                } else {
                    T::gemm(k, m, n, av.data(), !*ta, g.data(), false, T::zero(), &mut db);
                }
                accumulate(grads, *a, Tensor::new(av.rows(), av.cols(), da).unwrap());
                accumulate(grads, *b, Tensor::new(bv.rows(), bv.cols(), db).unwrap());
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, bias) => {
                let d = g.cols();
                let mut db = vec![T::zero(); d];
                for row in g.data().chunks(d) {
                    for (s, &v) in db.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *bias, Tensor::new(1, d, db).unwrap());
            }
            Op::Mul(a, b) => {
                let da = elementwise(g, self.value(*b), |p, q| p * q);
                let db = elementwise(g, self.value(*a), |p, q| p * q);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, map(g, |p| p * c));
            }
            Op::ScaleRows { weights, v } => {
                let d = g.cols();
                let mut dv = vec![T::zero(); d];
                for (row, &w) in g.data().chunks(d).zip(weights) {
                    for (s, &x) in dv.iter_mut().zip(row) {
                        *s += w * x;
                    }
                }
                accumulate(grads, *v, Tensor::new(1, d, dv).unwrap());
            }
            Op::Sigmoid(a) => {
                let da = elementwise(g, &node.value, |p, y| p * y * (T::one() - y));
                accumulate(grads, *a, da);
            }
            Op::DivScalar(a, s) => {
                let d = self.value(*s).item();
                accumulate(grads, *a, map(g, |p| p / d));
                let ds = -g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&p, &y)| p * y)
                    .sum::<T>()
                    / d;
                accumulate(grads, *s, Tensor::scalar(ds));
            }
            Op::Gelu(a) => {
                let (c, k) = (T::of(GELU_C), T::of(GELU_A));
                let half = T::of(0.5);
                let three = T::of(3.0);
                let da = elementwise(g, self.value(*a), |p, x| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    p * (half * (T::one() + t) + half * x * dt)
                });
                accumulate(grads, *a, da);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let k = y.cols();
                let mut dx = vec![T::zero(); y.len()];
                for ((gr, yr), dr) in g.data().chunks(k).zip(y.data().chunks(k)).zip(dx.chunks_mut(k)) {
                    let s: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                    for j in 0..k {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, *a, Tensor::new(y.rows(), k, dx).unwrap());
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let [n, d] = g.shape();
                let gm = self.value(*gamma).data();
                let dn = T::of(d as f64);
                let mut dx = vec![T::zero(); n * d];
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for i in 0..n {
                    let gr = &g.data()[i * d..(i + 1) * d];
                    let hr = &xhat[i * d..(i + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        db[j] += gr[j];
                        dg[j] += gr[j] * hr[j];
                        dxhat[j] = gr[j] * gm[j];
                        mean_dh += dxhat[j];
                        mean_dh_h += dxhat[j] * hr[j];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    for j in 0..d {
                        dx[i * d + j] = rstd[i] * (dxhat[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                accumulate(grads, *x, Tensor::new(n, d, dx).unwrap());
                accumulate(grads, *gamma, Tensor::new(1, d, dg).unwrap());
                accumulate(grads, *beta, Tensor::new(1, d, db).unwrap());
            }
            Op::MaskMul { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&p, &m)| p * m).collect();
                accumulate(grads, *x, Tensor::new(g.rows(), g.cols(), data).unwrap());
            }
            Op::Gather { x, idx } => {
                let src = self.value(*x);
                let d = src.cols();
                let mut dx = Tensor::zeros(src.rows(), d);
                for (r, &i) in idx.iter().enumerate() {
                    let target = dx.row_mut(i);
                    for (t, &v) in target.iter_mut().zip(g.row(r)) {
                        *t += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat(parts) => {
                let d = g.cols();
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let data = g.data()[start * d..(start + rows) * d].to_vec();
                    accumulate(grads, p, Tensor::new(rows, d, data).unwrap());
                    start += rows;
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::SegmentMean { x, group } => {
                let [n, d] = self.shape(*x);
                let inv = T::one() / T::of(*group as f64);
                let mut dx = vec![T::zero(); n * d];
                for r in 0..n {
                    let src = g.row(r / group);
                    for j in 0..d {
                        dx[r * d + j] = src[j] * inv;
                    }
                }
                accumulate(grads, *x, Tensor::new(n, d, dx).unwrap());
            }
            Op::Sum(a) => {
                let [r, c] = self.shape(*a);
                accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let [r, c] = self.shape(*a);
                let v = g.item() / T::of((r * c) as f64);
                accumulate(grads, *a, Tensor::filled(r, c, v));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let [n, k] = self.shape(*logits);
                let scale = g.item();
                let mut dx = vec![T::zero(); n * k];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..k {
                            dx[i * k + j] = probs[i * k + j] * scale;
                        }
                        dx[i * k + t] -= scale;
                    }
                }
                accumulate(grads, *logits, Tensor::new(n, k, dx).unwrap());
            }
            Op::Attention(saved) => self.backprop_attention(saved, g, grads),
        }
    }

    fn backprop_attention(&self, s: &AttentionSaved<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let [n, d] = g.shape();
        let (seq, heads) = (s.seq, s.heads);
        let batch = n / seq;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(s.q).data(), self.value(s.k).data(), self.value(s.v).data());
        let gd = g.data();
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = ((b * heads) + h) * seq * seq;
                let col = h * dh;
                for i in 0..seq {
                    let gi = &gd[(b * seq + i) * d + col..][..dh];
                    let p = &s.probs[base + i * seq..base + (i + 1) * seq];
                    for j in 0..seq {
                        let keep = s.keep.as_ref().map_or(T::one(), |m| m[base + i * seq + j]);
                        let vj = &vd[(b * seq + j) * d + col..][..dh];
                        dp[j] = dot(gi, vj) * keep;
                        let w = p[j] * keep;
                        let dvj = &mut dv[(b * seq + j) * d + col..][..dh];
                        for c in 0..dh {
                            dvj[c] += w * gi[c];
                        }
                    }
                    let inner: T = (0..seq).map(|j| p[j] * dp[j]).sum();
                    let qi = &qd[(b * seq + i) * d + col..][..dh];
                    for j in 0..seq {
                        let ds = p[j] * (dp[j] - inner) * scale;
                        let kj = &kd[(b * seq + j) * d + col..][..dh];
                        let dqi = &mut dq[(b * seq + i) * d + col..][..dh];
                        for c in 0..dh {
                            dqi[c] += ds * kj[c];
                        }
                        let dkj = &mut dk[(b * seq + j) * d + col..][..dh];
                        for c in 0..dh {
                            dkj[c] += ds * qi[c];
                        }
                    }
                }
            }
        }
        accumulate(grads, s.q, Tensor::new(n, d, dq).unwrap());
        accumulate(grads, s.k, Tensor::new(n, d, dk).unwrap());
        accumulate(grads, s.v, Tensor::new(n, d, dv).unwrap());
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
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

fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.rows(), a.cols(), data).unwrap()
}

fn map<T: Real>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(a.rows(), a.cols(), a.data().iter().map(|&p| f(p)).collect()).unwrap()
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients from one reverse pass, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}
