//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an arena: every operation eagerly computes its value and
//! appends a node recording its inputs. Because a node can only reference
//! nodes created before it, creation order is already a topological order and
//! [`Graph::backward`] simply walks the arena from the loss down to index 0.
//!
//! ```
//! use ctran_core::autodiff::Graph;
//! use ctran_core::tensor::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
//! let loss = g.sum(x);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

pub mod gradcheck;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use crate::tensor::{Scalar, Tensor};

pub use gradcheck::{grad_check, GradCheckReport, TensorCheck};

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Graph::custom_unary`]: `(input, output, upstream) -> input gradient`.
pub type CustomBackward<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T>>;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Dropout(Var, Vec<T>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    SumLastDim(Var),
    SplitHeads { x: Var, batch: usize, tokens: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, tokens: usize, heads: usize },
    Gather { table: Var, idx: Vec<usize> },
    TileRows { x: Var },
    Reshape(Var),
    ConcatBlocks { parts: Vec<(Var, usize)>, blocks: usize },
    TakeBlockRows { x: Var, block: usize, offset: usize, len: usize },
    Im2Col { x: Var, geom: ConvGeom },
    MaskedBce { logits: Var, targets: Vec<T>, weights: Vec<(usize, T)> },
    Custom { x: Var, backward: CustomBackward<T> },
}

/// Computation tape. Values are computed eagerly as nodes are added.
pub struct Graph<T: Scalar> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `-[y ln σ(x) + (1-y) ln(1-σ(x))]`.
pub(crate) fn bce_with_logit<T: Scalar>(x: T, y: T) -> T {
    x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.req(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_acc(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        let r = self.req(a) || self.req(b);
        Ok(self.push(out, Op::MatMul(a, b), r))
    }

    /// Grouped product `[G×m×k]·[G×k×n]`, or `[G×m×k]·[G×n×k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = Tensor::zeros(vec![groups, m, n]);
        {
            let (av, bv) = (self.values[a.0].data(), self.values[b.0].data());
            let od = out.data_mut();
            for gi in 0..groups {
                let ag = &av[gi * m * k..(gi + 1) * m * k];
                let bg = &bv[gi * k * n..(gi + 1) * k * n];
                let og = &mut od[gi * m * n..(gi + 1) * m * n];
                if trans_b {
                    matmul_nt_acc(ag, bg, og, m, k, n);
                } else {
                    matmul_acc(ag, bg, og, m, k, n);
                }
            }
        }
        let r = self.req(a) || self.req(b);
        Ok(self.push(out, Op::BatchMatMul { a, b, trans_b }, r))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let r = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Add(a, b), r))
    }

    /// Adds a `[d]` vector to every trailing-dimension slice of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let r = self.req(x) || self.req(bias);
        Ok(self.push(out, Op::AddRow(x, bias), r))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let r = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Mul(a, b), r))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let r = self.req(x);
        self.push(out, Op::Scale(x, c), r)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let r = self.req(x);
        self.push(out, Op::Relu(x), r)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let r = self.req(x);
        self.push(out, Op::Sigmoid(x), r)
    }

    /// Inverted dropout. Outside training (or with `p == 0`) this returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let r = self.req(x);
        Ok(self.push(out, Op::Dropout(x, mask), r))
    }

    /// Softmax over the trailing dimension, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        if d > 0 {
            for row in out.data_mut().chunks_exact_mut(d) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total = total + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / total;
                }
            }
        }
        let r = self.req(x);
        self.push(out, Op::Softmax(x), r)
    }

    /// Per-slice normalization over the trailing dimension followed by `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let dt = T::from_usize(d).expect("dimension fits");
        let xv = self.value(x);
        let rows = xv.outer_len();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in xv.data().chunks_exact(d) {
            let mean = row.iter().copied().fold(T::zero(), |a, b| a + b) / dt;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(T::zero(), |a, b| a + b)
                / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            xhat.extend(row.iter().map(|&v| (v - mean) * rs));
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(xhat.len());
        for row in xhat.chunks_exact(d) {
            out.extend(row.iter().zip(gv).zip(bv).map(|((&h, &g), &b)| g * h + b));
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let r = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, r))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().fold(T::zero(), |a, b| a + b);
        let r = self.req(x);
        self.push(Tensor::scalar(total), Op::Sum(x), r)
    }

    /// Sums the trailing dimension away.
    pub fn sum_last_dim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(Error::shape("sum_last_dim", xv.shape(), &[]));
        }
        let d = xv.last_dim();
        let data: Vec<T> = if d == 0 {
            vec![T::zero(); xv.shape()[..xv.rank() - 1].iter().product()]
        } else {
            xv.data()
                .chunks_exact(d)
                .map(|row| row.iter().copied().fold(T::zero(), |a, b| a + b))
                .collect()
        };
        let out = Tensor::new(xv.shape()[..xv.rank() - 1].to_vec(), data)?;
        let r = self.req(x);
        Ok(self.push(out, Op::SumLastDim(x), r))
    }

    /// `[batch·tokens × heads·dh]` → `[batch·heads × tokens × dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != batch * tokens || heads == 0 || !s[1].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", s, &[batch, tokens, heads]));
        }
        let dh = s[1] / heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..tokens {
                let row = &src[(b * tokens + t) * heads * dh..][..heads * dh];
                for h in 0..heads {
                    let dst = ((b * heads + h) * tokens + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        let out = Tensor::new(vec![batch * heads, tokens, dh], out)?;
        let r = self.req(x);
        Ok(self.push(out, Op::SplitHeads { x, batch, tokens, heads }, r))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] != batch * heads || s[1] != tokens {
            return Err(Error::shape("merge_heads", s, &[batch, tokens, heads]));
        }
        let dh = s[2];
        let out = merge_heads_data(self.value(x).data(), batch, tokens, heads, dh);
        let out = Tensor::new(vec![batch * tokens, heads * dh], out)?;
        let r = self.req(x);
        Ok(self.push(out, Op::MergeHeads { x, batch, tokens, heads }, r))
    }

    /// Row lookup into a `[rows×d]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", s, &[]));
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", s, &[bad]));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], out)?;
        let r = self.req(table);
        Ok(self.push(out, Op::Gather { table, idx: idx.to_vec() }, r))
    }

    /// Repeats `x` `times` times along its leading dimension.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(Error::shape("tile_rows", xv.shape(), &[times]));
        }
        let mut shape = xv.shape().to_vec();
        shape[0] *= times;
        let mut out = Vec::with_capacity(xv.len() * times);
        for _ in 0..times {
            out.extend_from_slice(xv.data());
        }
        let out = Tensor::new(shape, out)?;
        let r = self.req(x);
        Ok(self.push(out, Op::TileRows { x }, r))
    }

    /// Same elements under a new shape.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let r = self.req(x);
        Ok(self.push(out, Op::Reshape(x), r))
    }

    /// Interleaves row blocks: each part `i` is `[blocks·rows_i × d]`, and block
    /// `b` of the output is part 0's block `b`, then part 1's block `b`, and so on.
    pub fn concat_blocks(&mut self, parts: &[(Var, usize)], blocks: usize) -> Result<Var> {
        let Some(&(first, _)) = parts.first() else {
            return Err(Error::shape("concat_blocks", &[], &[blocks]));
        };
        let d = self.value(first).last_dim();
        for &(p, rows) in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d || s[0] != rows * blocks {
                return Err(Error::shape("concat_blocks", s, &[blocks * rows, d]));
            }
        }
        let total_rows: usize = parts.iter().map(|&(_, r)| r).sum();
        let mut out = Vec::with_capacity(blocks * total_rows * d);
        for b in 0..blocks {
            for &(p, rows) in parts {
                out.extend_from_slice(&self.value(p).data()[b * rows * d..(b + 1) * rows * d]);
            }
        }
        let out = Tensor::new(vec![blocks * total_rows, d], out)?;
        let r = parts.iter().any(|&(p, _)| self.req(p));
        Ok(self.push(out, Op::ConcatBlocks { parts: parts.to_vec(), blocks }, r))
    }

    /// From `[blocks·block × d]`, keeps rows `offset..offset+len` of every block.
    pub fn take_block_rows(&mut self, x: Var, block: usize, offset: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || block == 0 || !s[0].is_multiple_of(block) || offset + len > block {
            return Err(Error::shape("take_block_rows", s, &[block, offset, len]));
        }
        let (blocks, d) = (s[0] / block, s[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(blocks * len * d);
        for b in 0..blocks {
            out.extend_from_slice(&src[(b * block + offset) * d..(b * block + offset + len) * d]);
        }
        let out = Tensor::new(vec![blocks * len, d], out)?;
        let r = self.req(x);
        Ok(self.push(out, Op::TakeBlockRows { x, block, offset, len }, r))
    }

    /// Patch extraction for a square-kernel convolution over `[B×H×W×C]` (or
    /// `[H×W×C]`) input. Output is `[B·Ho·Wo × k·k·C]`, zero padded.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, h, w, c) = match *s.as_slice() {
            [h, w, c] => (1, h, w, c),
            [b, h, w, c] => (b, h, w, c),
            _ => return Err(Error::shape("im2col", &s, &[])),
        };
        if kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::shape("im2col", &s, &[kernel, stride, pad]));
        }
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom { batch, h, w, c, k: kernel, stride, pad, ho, wo };
        let src = self.value(x).data();
        let cols = kernel * kernel * c;
        let mut out = vec![T::zero(); batch * ho * wo * cols];
        for_each_patch(&geom, |dst, srcidx| out[dst..dst + c].copy_from_slice(&src[srcidx..srcidx + c]));
        let out = Tensor::new(vec![batch * ho * wo, cols], out)?;
        let r = self.req(x);
        Ok(self.push(out, Op::Im2Col { x, geom }, r))
    }

    /// Weighted binary cross-entropy on logits over a subset of positions.
    /// Positions absent from `weights` contribute neither loss nor gradient.
    pub fn masked_bce_with_logits(
        &mut self,
        logits: Var,
        targets: &[T],
        weights: &[(usize, T)],
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 1 || lv.len() != targets.len() {
            return Err(Error::shape("masked_bce", lv.shape(), &[targets.len()]));
        }
        if let Some(&(bad, _)) = weights.iter().find(|&&(i, _)| i >= targets.len()) {
            return Err(Error::shape("masked_bce", lv.shape(), &[bad]));
        }
        let x = lv.data();
        let loss = weights
            .iter()
            .fold(T::zero(), |acc, &(i, w)| acc + w * bce_with_logit(x[i], targets[i]));
        let r = self.req(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedBce {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            r,
        ))
    }

    /// Elementwise op with caller-supplied forward and backward rules.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(T) -> T,
        backward: CustomBackward<T>,
    ) -> Var {
        let out = self.value(x).map(forward);
        let r = self.req(x);
        self.push(out, Op::Custom { x, backward }, r)
    }

    /// Reverse pass from a scalar loss. Each tape supports exactly one backward.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let seed = Tensor::full(shape.to_vec(), T::one());
        self.backward_with(loss, seed)
    }

    /// Reverse pass seeded with an explicit upstream gradient for `output`.
    pub fn backward_with(&mut self, output: Var, seed: Tensor<T>) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::shape("backward seed", seed.shape(), self.shape(output)));
        }
        self.consumed = true;
        if !self.req(output) {
            return Ok(());
        }
        self.grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor<T>) {
        let Graph {
            values,
            grads,
            ops,
            requires,
            ..
        } = self;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !requires[v.0] {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(values[v.0].shape().to_vec()));
            f(slot.data_mut());
        };
        let gd = g.data();
        let out = &values[i];
        match &ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&values[a.0], &values[b.0]);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                acc(*a, &mut |ga| matmul_nt_acc(gd, bv.data(), ga, m, n, k));
                acc(*b, &mut |gb| matmul_tn_acc(av.data(), gd, gb, m, k, n));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (&values[a.0], &values[b.0]);
                let (groups, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                let (ad, bd) = (av.data(), bv.data());
                acc(*a, &mut |ga| {
                    for gi in 0..groups {
                        let gg = &gd[gi * m * n..(gi + 1) * m * n];
                        let bg = &bd[gi * k * n..(gi + 1) * k * n];
                        let dst = &mut ga[gi * m * k..(gi + 1) * m * k];
                        if *trans_b {
                            matmul_acc(gg, bg, dst, m, n, k);
                        } else {
                            matmul_nt_acc(gg, bg, dst, m, n, k);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for gi in 0..groups {
                        let gg = &gd[gi * m * n..(gi + 1) * m * n];
                        let ag = &ad[gi * m * k..(gi + 1) * m * k];
                        let dst = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            matmul_tn_acc(gg, ag, dst, m, n, k);
                        } else {
                            matmul_tn_acc(ag, gg, dst, m, k, n);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |ga| add_into(ga, gd));
                }
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, gd));
                let d = values[bias.0].len();
                acc(*bias, &mut |gb| {
                    for row in gd.chunks_exact(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (values[a.0].data(), values[b.0].data());
                acc(*a, &mut |ga| {
                    for ((o, &gv), &y) in ga.iter_mut().zip(gd).zip(bv) {
                        *o = *o + gv * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &gv), &x) in gb.iter_mut().zip(gd).zip(av) {
                        *o = *o + gv * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (o, &gv) in gx.iter_mut().zip(gd) {
                    *o = *o + gv * *c;
                }
            }),
            Op::Relu(x) => {
                let xv = values[x.0].data();
                acc(*x, &mut |gx| {
                    for ((o, &gv), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        if v > T::zero() {
                            *o = *o + gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = out.data();
                acc(*x, &mut |gx| {
                    for ((o, &gv), &y) in gx.iter_mut().zip(gd).zip(yv) {
                        *o = *o + gv * y * (T::one() - y);
                    }
                });
            }
            Op::Dropout(x, mask) => acc(*x, &mut |gx| {
                for ((o, &gv), &m) in gx.iter_mut().zip(gd).zip(mask) {
                    *o = *o + gv * m;
                }
            }),
            Op::Softmax(x) => {
                let d = out.last_dim();
                let yv = out.data();
                acc(*x, &mut |gx| {
                    for ((orow, grow), yrow) in gx.chunks_exact_mut(d).zip(gd.chunks_exact(d)).zip(yv.chunks_exact(d)) {
                        let dot = grow.iter().zip(yrow).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for ((o, &gv), &y) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + y * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = out.last_dim();
                let gam = values[gamma.0].data();
                acc(*gamma, &mut |gg| {
                    for (grow, hrow) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((o, &gv), &h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *o = *o + gv * h;
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for grow in gd.chunks_exact(d) {
                        add_into(gb, grow);
                    }
                });
                let dt = T::from_usize(d).expect("dimension fits");
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![T::zero(); d];
                    for (((orow, grow), hrow), &rs) in gx
                        .chunks_exact_mut(d)
                        .zip(gd.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .zip(rstd)
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..d {
                            dxhat[j] = grow[j] * gam[j];
                            mean_d = mean_d + dxhat[j];
                            mean_dh = mean_dh + dxhat[j] * hrow[j];
                        }
                        mean_d = mean_d / dt;
                        mean_dh = mean_dh / dt;
                        for j in 0..d {
                            orow[j] = orow[j] + rs * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o = *o + g0));
            }
            Op::SumLastDim(x) => {
                let d = values[x.0].last_dim();
                if d > 0 {
                    acc(*x, &mut |gx| {
                        for (row, &gv) in gx.chunks_exact_mut(d).zip(gd) {
                            row.iter_mut().for_each(|o| *o = *o + gv);
                        }
                    });
                }
            }
            Op::SplitHeads { x, batch, tokens, heads } => {
                let dh = out.shape()[2];
                let merged = merge_heads_data(gd, *batch, *tokens, *heads, dh);
                acc(*x, &mut |gx| add_into(gx, &merged));
            }
            Op::MergeHeads { x, batch, tokens, heads } => {
                let dh = values[x.0].shape()[2];
                acc(*x, &mut |gx| {
                    for b in 0..*batch {
                        for t in 0..*tokens {
                            let row = &gd[(b * tokens + t) * heads * dh..][..heads * dh];
                            for h in 0..*heads {
                                let dst = ((b * heads + h) * tokens + t) * dh;
                                add_into(&mut gx[dst..dst + dh], &row[h * dh..(h + 1) * dh]);
                            }
                        }
                    }
                });
            }
            Op::Gather { table, idx } => {
                let d = values[table.0].last_dim();
                acc(*table, &mut |gt| {
                    for (k, &row) in idx.iter().enumerate() {
                        add_into(&mut gt[row * d..(row + 1) * d], &gd[k * d..(k + 1) * d]);
                    }
                });
            }
            Op::TileRows { x, .. } => {
                let n = values[x.0].len();
                acc(*x, &mut |gx| {
                    for chunk in gd.chunks_exact(n) {
                        add_into(gx, chunk);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, gd)),
            Op::ConcatBlocks { parts, blocks } => {
                let d = out.last_dim();
                let total: usize = parts.iter().map(|&(_, r)| r).sum();
                let mut offset = 0;
                for &(p, rows) in parts {
                    acc(p, &mut |gp| {
                        for b in 0..*blocks {
                            let src = &gd[(b * total + offset) * d..(b * total + offset + rows) * d];
                            add_into(&mut gp[b * rows * d..(b + 1) * rows * d], src);
                        }
                    });
                    offset += rows;
                }
            }
            Op::TakeBlockRows { x, block, offset, len } => {
                let d = out.last_dim();
                let blocks = values[x.0].shape()[0] / block;
                acc(*x, &mut |gx| {
                    for b in 0..blocks {
                        let dst = &mut gx[(b * block + offset) * d..(b * block + offset + len) * d];
                        add_into(dst, &gd[b * len * d..(b + 1) * len * d]);
                    }
                });
            }
            Op::Im2Col { x, geom } => {
                let c = geom.c;
                acc(*x, &mut |gx| {
                    for_each_patch(geom, |dst, src| add_into(&mut gx[src..src + c], &gd[dst..dst + c]));
                });
            }
            Op::MaskedBce { logits, targets, weights } => {
                let g0 = gd[0];
                let xv = values[logits.0].data();
                acc(*logits, &mut |gx| {
                    for &(i, w) in weights {
                        gx[i] = gx[i] + g0 * w * (sigmoid(xv[i]) - targets[i]);
                    }
                });
            }
            Op::Custom { x, backward } => {
                let dx = backward(&values[x.0], out, g);
                acc(*x, &mut |gx| add_into(gx, dx.data()));
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o = *o + v;
    }
}

fn merge_heads_data<T: Scalar>(src: &[T], batch: usize, tokens: usize, heads: usize, dh: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..tokens {
                let s = ((b * heads + h) * tokens + t) * dh;
                let d = (b * tokens + t) * heads * dh + h * dh;
                out[d..d + dh].copy_from_slice(&src[s..s + dh]);
            }
        }
    }
    out
}

/// Calls `f(dst_offset, src_offset)` for every in-bounds `C`-wide pixel copy of an im2col.
fn for_each_patch(geom: &ConvGeom, mut f: impl FnMut(usize, usize)) {
    let ConvGeom { batch, h, w, c, k, stride, pad, ho, wo } = *geom;
    let cols = k * k * c;
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (b * ho + oy) * wo + ox;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((b * h + iy as usize) * w + ix as usize) * c;
                        let dst = row * cols + (ky * k + kx) * c;
                        f(dst, src);
                    }
                }
            }
        }
    }
}
