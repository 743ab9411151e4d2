//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its variables in execution
//! order, so node ids are already a topological order. Leaves may borrow their
//! tensors (parameters are never copied onto the tape) or own them.
//! [`Tape::backward`] walks the record once in reverse, accumulating gradients
//! additively at fan-out nodes; a tape supports exactly one backward pass.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use crate::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds recorded on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulBt,
    Add,
    AddRow,
    MulRow,
    Sub,
    Mul,
    Scale,
    Neg,
    Relu,
    Sigmoid,
    SoftmaxRows,
    MaskedFill,
    Embedding,
    Sum,
    Mean,
    SumCols,
    ConcatCols,
    SliceCols,
    LayerNorm,
    Dropout,
    Transpose,
    Reshape,
    NormalizeRows,
    BceWithLogits,
    Bce,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Neg(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    MaskedFill { x: Var, keep: Vec<bool> },
    Embedding { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, end: usize },
    LayerNorm { x: Var, inv_std: Vec<S> },
    Dropout { x: Var, scale: Vec<S> },
    Transpose(Var),
    Reshape(Var),
    NormalizeRows { x: Var, inv_norm: Vec<S> },
    BceWithLogits { logits: Var, targets: Vec<S> },
    Bce { probs: Var, targets: Vec<S>, eps: S },
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulBt(..) => OpKind::MatMulBt,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Neg(..) => OpKind::Neg,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::MaskedFill { .. } => OpKind::MaskedFill,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumCols(..) => OpKind::SumCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
            Op::Bce { .. } => OpKind::Bce,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Neg(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::SoftmaxRows(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumCols(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::MaskedFill { x, .. }
            | Op::SliceCols { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::Dropout { x, .. }
            | Op::NormalizeRows { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatCols(xs) => xs.clone(),
            Op::BceWithLogits { logits, .. } => vec![*logits],
            Op::Bce { probs, .. } => vec![*probs],
        }
    }
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Value used by [`Tape::masked_fill`] for excluded positions; finite so every
/// forward value stays finite, and far enough below any logit that a row
/// softmax assigns it exactly zero weight.
pub const MASK_FILL: f64 = -1.0e9;

/// Gradients produced by one backward pass, indexed by leaf [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `v`'s shape when `v` was unreachable.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recorded computation graph.
pub struct Tape<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
    consumed: bool,
}

impl<'a, S: Scalar> Default for Tape<'a, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Scalar> Tape<'a, S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Borrowed leaf; `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, t: &'a Tensor<S>, requires_grad: bool) -> Var {
        self.push_node(Cow::Borrowed(t), Op::Leaf, requires_grad)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'a Tensor<S>) -> Var {
        self.leaf(t, true)
    }

    /// Owned leaf that requires gradients.
    pub fn variable(&mut self, t: Tensor<S>) -> Var {
        self.push_node(Cow::Owned(t), Op::Leaf, true)
    }

    /// Owned leaf without gradients.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push_node(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Input node ids of `v`, in argument order.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(&mut self, value: Cow<'a, Tensor<S>>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        let kind = op.kind();
        let value = value.check_finite(op_name(kind))?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        // Saved activations are only needed when something downstream differentiates.
        let op = if requires_grad { op } else { strip(op) };
        Ok(self.push_node(Cow::Owned(value), op, requires_grad))
    }

    fn v(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.v(a).shape() != self.v(b).shape() {
            return Err(shape_err!(op, "{:?} vs {:?}", self.v(a).shape(), self.v(b).shape()));
        }
        Ok(())
    }

    // ── Products ─────────────────────────────────────────────────────

    /// `a · b` for a: m×k, b: k×n.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.v(a).dims2("matmul")?;
        let (k2, n) = self.v(b).dims2("matmul")?;
        if k != k2 {
            return Err(shape_err!("matmul", "({m}x{k}) x ({k2}x{n})"));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nn(self.v(a).data(), self.v(b).data(), &mut out, m, k, n);
        self.push_op(Tensor::new([m, n], out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ` for a: m×k, b: n×k.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.v(a).dims2("matmul_bt")?;
        let (n, k2) = self.v(b).dims2("matmul_bt")?;
        if k != k2 {
            return Err(shape_err!("matmul_bt", "({m}x{k}) x ({n}x{k2})ᵀ"));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nt(self.v(a).data(), self.v(b).data(), &mut out, m, k, n);
        self.push_op(Tensor::new([m, n], out)?, Op::MatMulBt(a, b))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.v(a), self.v(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push_op(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push_op(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push_op(t, Op::Mul(a, b))
    }

    fn row_vector_len(&self, op: &'static str, a: Var, r: Var) -> Result<(usize, usize)> {
        let (m, n) = self.v(a).dims2(op)?;
        let rt = self.v(r);
        if rt.len() != n || rt.rows() != 1 {
            return Err(shape_err!(op, "row vector {:?} does not fit {m}x{n}", rt.shape()));
        }
        Ok((m, n))
    }

    /// `a + 1·r` broadcasting the row vector `r` (length n) over a: m×n.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, n) = self.row_vector_len("add_row", a, r)?;
        let rv = self.v(r).data();
        let mut out = self.v(a).clone();
        for (idx, o) in out.data_mut().iter_mut().enumerate() {
            *o += rv[idx % n];
        }
        self.push_op(out, Op::AddRow(a, r))
    }

    /// `a ⊙ 1·r` broadcasting the row vector `r` over the rows of a.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, n) = self.row_vector_len("mul_row", a, r)?;
        let rv = self.v(r).data();
        let mut out = self.v(a).clone();
        for (idx, o) in out.data_mut().iter_mut().enumerate() {
            *o *= rv[idx % n];
        }
        self.push_op(out, Op::MulRow(a, r))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let t = self.v(x).map(|v| v * c);
        self.push_op(t, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let t = self.v(x).map(|v| -v);
        self.push_op(t, Op::Neg(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.v(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push_op(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.v(x).map(kernels::sigmoid);
        self.push_op(t, Op::Sigmoid(x))
    }

    /// Softmax over each row of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.v(x).dims2("softmax_rows")?;
        let src = self.v(x).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let dst = &mut out[i * n..(i + 1) * n];
            let mut total = S::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        self.push_op(Tensor::new([m, n], out)?, Op::SoftmaxRows(x))
    }

    /// Replaces excluded entries with [`MASK_FILL`]. `keep` covers either every
    /// element of `x` or (broadcast over rows) every column.
    pub fn masked_fill(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (_, n) = self.v(x).dims2("masked_fill")?;
        let len = self.v(x).len();
        let keep: Vec<bool> = if keep.len() == len {
            keep.to_vec()
        } else if keep.len() == n {
            (0..len).map(|i| keep[i % n]).collect()
        } else {
            return Err(shape_err!("masked_fill", "mask of length {} for {:?}", keep.len(), self.v(x).shape()));
        };
        let fill = S::of(MASK_FILL);
        let mut out = self.v(x).clone();
        for (o, &k) in out.data_mut().iter_mut().zip(&keep) {
            if !k {
                *o = fill;
            }
        }
        self.push_op(out, Op::MaskedFill { x, keep })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.v(x).transpose()?;
        self.push_op(t, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.v(x).clone().reshape(shape.to_vec())?;
        self.push_op(t, Op::Reshape(x))
    }

    // ── Gathers and layout ───────────────────────────────────────────

    /// Rows `ids` of `table` (V×d), giving an `ids.len()`×d matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.v(table).dims2("embedding")?;
        let src = self.v(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange { what: "embedding table", index: id, size: vocab });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push_op(Tensor::new([ids.len(), d], out)?, Op::Embedding { table, ids: ids.to_vec() })
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err!("concat_cols", "no inputs"))?;
        let m = self.v(first).rows();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.v(x).dims2("concat_cols")?;
            if r != m {
                return Err(shape_err!("concat_cols", "row counts {m} vs {r}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![S::zero(); m * total];
        let mut offset = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let src = self.v(x).data();
            for i in 0..m {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.push_op(Tensor::new([m, total], out)?, Op::ConcatCols(xs.to_vec()))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.v(x).dims2("slice_cols")?;
        if start >= end || end > n {
            return Err(shape_err!("slice_cols", "range {start}..{end} of {n} columns"));
        }
        let w = end - start;
        let src = self.v(x).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        self.push_op(Tensor::new([m, w], out)?, Op::SliceCols { x, start, end })
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.v(x).sum());
        self.push_op(t, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.v(x).len();
        if n == 0 {
            return Err(shape_err!("mean", "empty tensor"));
        }
        let t = Tensor::scalar(self.v(x).sum() / S::of(n as f64));
        self.push_op(t, Op::Mean(x))
    }

    /// Row sums: m×n → m×1.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.v(x).dims2("sum_cols")?;
        let src = self.v(x).data();
        let out = (0..m).map(|i| src[i * n..(i + 1) * n].iter().copied().sum()).collect();
        self.push_op(Tensor::new([m, 1], out)?, Op::SumCols(x))
    }

    // ── Normalization and regularization ─────────────────────────────

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: S) -> Result<Var> {
        let (m, n) = self.v(x).dims2("layer_norm")?;
        let src = self.v(x).data();
        let nf = S::of(n as f64);
        let mut out = vec![S::zero(); m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let inv = S::one() / (var + eps).sqrt();
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push_op(Tensor::new([m, n], out)?, Op::LayerNorm { x, inv_std })
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`. Identity when
    /// `training` is false or `p == 0`. The mask is a pure function of `seed`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        check_dropout_p(p)?;
        if !training || p == 0.0 {
            return Ok(x);
        }
        let scale = dropout_mask(self.v(x).len(), p, seed);
        let mut out = self.v(x).clone();
        for (o, &s) in out.data_mut().iter_mut().zip(&scale) {
            *o *= s;
        }
        self.push_op(out, Op::Dropout { x, scale })
    }

    /// Scales each row to unit Euclidean norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.v(x).dims2("normalize_rows")?;
        let src = self.v(x).data();
        let mut out = vec![S::zero(); m * n];
        let mut inv_norm = Vec::with_capacity(m);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            let inv = if norm > S::zero() { S::one() / norm } else { S::zero() };
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v * inv;
            }
            inv_norm.push(inv);
        }
        self.push_op(Tensor::new([m, n], out)?, Op::NormalizeRows { x, inv_norm })
    }

    // ── Losses ───────────────────────────────────────────────────────

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// computed stably from the logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[S]) -> Result<Var> {
        let t = self.v(logits);
        if t.len() != targets.len() || t.is_empty() {
            return Err(shape_err!("bce_with_logits", "{} logits vs {} targets", t.len(), targets.len()));
        }
        let n = S::of(t.len() as f64);
        let total: S = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(S::zero()) - x * y + (S::one() + (-x.abs()).exp()).ln())
            .sum();
        self.push_op(Tensor::scalar(total / n), Op::BceWithLogits { logits, targets: targets.to_vec() })
    }

    /// Mean binary cross-entropy of probabilities clamped to `[eps, 1-eps]`.
    pub fn bce(&mut self, probs: Var, targets: &[S], eps: S) -> Result<Var> {
        let t = self.v(probs);
        if t.len() != targets.len() || t.is_empty() {
            return Err(shape_err!("bce", "{} predictions vs {} targets", t.len(), targets.len()));
        }
        let n = S::of(t.len() as f64);
        let total: S = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = p.max(eps).min(S::one() - eps);
                -(y * p.ln() + (S::one() - y) * (S::one() - p).ln())
            })
            .sum();
        self.push_op(Tensor::scalar(total / n), Op::Bce { probs, targets: targets.to_vec(), eps })
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        let t = self.v(loss);
        if !t.is_scalar() {
            return Err(Error::NotScalar(t.shape().to_vec()));
        }
        let seed = Tensor::full(t.shape().to_vec(), S::one());
        self.backward_from(vec![(loss, seed)])
    }

    /// Backpropagates explicit output cotangents: the result is the gradient
    /// of `Σ ⟨seed_k, output_k⟩`.
    pub fn backward_from(&mut self, seeds: Vec<(Var, Tensor<S>)>) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.v(v).shape() {
                return Err(shape_err!("backward", "seed {:?} for output {:?}", g.shape(), self.v(v).shape()));
            }
            accumulate(&mut grads[v.0], g)?;
            last = last.max(v.0 + 1);
        }
        for idx in (0..last).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn send(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) -> Result<()> {
        if self.wants(v) {
            accumulate(&mut grads[v.0], g)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.v(*a).dims2("matmul")?;
                let n = self.v(*b).cols();
                if self.wants(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm_nt(g.data(), self.v(*b).data(), &mut da, m, n, k);
                    self.send(grads, *a, Tensor::new(self.v(*a).shape().to_vec(), da)?)?;
                }
                if self.wants(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm_tn(self.v(*a).data(), g.data(), &mut db, m, k, n);
                    self.send(grads, *b, Tensor::new(self.v(*b).shape().to_vec(), db)?)?;
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.v(*a).dims2("matmul_bt")?;
                let n = self.v(*b).rows();
                if self.wants(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm_nn(g.data(), self.v(*b).data(), &mut da, m, n, k);
                    self.send(grads, *a, Tensor::new(self.v(*a).shape().to_vec(), da)?)?;
                }
                if self.wants(*b) {
                    let mut db = vec![S::zero(); n * k];
                    gemm_tn(g.data(), self.v(*a).data(), &mut db, m, n, k);
                    self.send(grads, *b, Tensor::new(self.v(*b).shape().to_vec(), db)?)?;
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone())?;
                self.send(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone())?;
                self.send(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let t = zip(g, self.v(*b), |x, y| x * y);
                    self.send(grads, *a, t)?;
                }
                if self.wants(*b) {
                    let t = zip(g, self.v(*a), |x, y| x * y);
                    self.send(grads, *b, t)?;
                }
            }
            Op::AddRow(a, r) => {
                self.send(grads, *a, g.clone())?;
                if self.wants(*r) {
                    let n = self.v(*r).len();
                    let mut dr = vec![S::zero(); n];
                    for (idx, &v) in g.data().iter().enumerate() {
                        dr[idx % n] += v;
                    }
                    self.send(grads, *r, Tensor::new(self.v(*r).shape().to_vec(), dr)?)?;
                }
            }
            Op::MulRow(a, r) => {
                let n = self.v(*r).len();
                let rv = self.v(*r).data();
                if self.wants(*a) {
                    let mut da = g.clone();
                    for (idx, v) in da.data_mut().iter_mut().enumerate() {
                        *v *= rv[idx % n];
                    }
                    self.send(grads, *a, da)?;
                }
                if self.wants(*r) {
                    let av = self.v(*a).data();
                    let mut dr = vec![S::zero(); n];
                    for (idx, &v) in g.data().iter().enumerate() {
                        dr[idx % n] += v * av[idx];
                    }
                    self.send(grads, *r, Tensor::new(self.v(*r).shape().to_vec(), dr)?)?;
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.send(grads, *x, g.map(|v| v * c))?;
            }
            Op::Neg(x) => self.send(grads, *x, g.map(|v| -v))?,
            Op::Relu(x) => {
                let t = zip(g, self.v(*x), |gv, xv| if xv > S::zero() { gv } else { S::zero() });
                self.send(grads, *x, t)?;
            }
            Op::Sigmoid(x) => {
                let t = zip(g, out, |gv, y| gv * y * (S::one() - y));
                self.send(grads, *x, t)?;
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = out.dims2("softmax_rows")?;
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let y = &out.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let dot: S = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.send(grads, *x, Tensor::new([m, n], dx)?)?;
            }
            Op::MaskedFill { x, keep } => {
                let mut dx = g.clone();
                for (v, &k) in dx.data_mut().iter_mut().zip(keep) {
                    if !k {
                        *v = S::zero();
                    }
                }
                self.send(grads, *x, dx)?;
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = self.v(*table).dims2("embedding")?;
                let mut dt = vec![S::zero(); vocab * d];
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, &src) in dt[id * d..(id + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *dst += src;
                    }
                }
                self.send(grads, *table, Tensor::new([vocab, d], dt)?)?;
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.send(grads, *x, Tensor::full(self.v(*x).shape().to_vec(), gv))?;
            }
            Op::Mean(x) => {
                let n = S::of(self.v(*x).len() as f64);
                let gv = g.item() / n;
                self.send(grads, *x, Tensor::full(self.v(*x).shape().to_vec(), gv))?;
            }
            Op::SumCols(x) => {
                let (m, n) = self.v(*x).dims2("sum_cols")?;
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let gi = g.data()[i];
                    for v in &mut dx[i * n..(i + 1) * n] {
                        *v = gi;
                    }
                }
                self.send(grads, *x, Tensor::new([m, n], dx)?)?;
            }
            Op::ConcatCols(xs) => {
                let (m, total) = out.dims2("concat_cols")?;
                let mut offset = 0;
                for &x in xs {
                    let w = self.v(x).cols();
                    if self.wants(x) {
                        let mut dx = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dx.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.send(grads, x, Tensor::new(self.v(x).shape().to_vec(), dx)?)?;
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start, end } => {
                let (m, n) = self.v(*x).dims2("slice_cols")?;
                let w = end - start;
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.send(grads, *x, Tensor::new(self.v(*x).shape().to_vec(), dx)?)?;
            }
            Op::LayerNorm { x, inv_std } => {
                let (m, n) = out.dims2("layer_norm")?;
                let nf = S::of(n as f64);
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let y = &out.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let mean_g = gr.iter().copied().sum::<S>() / nf;
                    let mean_gy = gr.iter().zip(y).map(|(&a, &b)| a * b).sum::<S>() / nf;
                    for j in 0..n {
                        dx[i * n + j] = inv_std[i] * (gr[j] - mean_g - y[j] * mean_gy);
                    }
                }
                self.send(grads, *x, Tensor::new(self.v(*x).shape().to_vec(), dx)?)?;
            }
            Op::Dropout { x, scale } => {
                let mut dx = g.clone();
                for (v, &s) in dx.data_mut().iter_mut().zip(scale) {
                    *v *= s;
                }
                self.send(grads, *x, dx)?;
            }
            Op::Transpose(x) => self.send(grads, *x, g.transpose()?)?,
            Op::Reshape(x) => {
                let shape = self.v(*x).shape().to_vec();
                self.send(grads, *x, g.clone().reshape(shape)?)?;
            }
            Op::NormalizeRows { x, inv_norm } => {
                let (m, n) = out.dims2("normalize_rows")?;
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let y = &out.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let dot: S = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = inv_norm[i] * (gr[j] - y[j] * dot);
                    }
                }
                self.send(grads, *x, Tensor::new(self.v(*x).shape().to_vec(), dx)?)?;
            }
            Op::BceWithLogits { logits, targets } => {
                let xs = self.v(*logits);
                let scale = g.item() / S::of(xs.len() as f64);
                let data = xs.data().iter().zip(targets).map(|(&x, &y)| (kernels::sigmoid(x) - y) * scale).collect();
                self.send(grads, *logits, Tensor::new(xs.shape().to_vec(), data)?)?;
            }
            Op::Bce { probs, targets, eps } => {
                let ps = self.v(*probs);
                let scale = g.item() / S::of(ps.len() as f64);
                let (lo, hi) = (*eps, S::one() - *eps);
                let data = ps
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| {
                        if p < lo || p > hi {
                            S::zero()
                        } else {
                            scale * (-(y / p) + (S::one() - y) / (S::one() - p))
                        }
                    })
                    .collect();
                self.send(grads, *probs, Tensor::new(ps.shape().to_vec(), data)?)?;
            }
        }
        Ok(())
    }
}

fn op_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::MatMul => "matmul",
        OpKind::MatMulBt => "matmul_bt",
        OpKind::Add => "add",
        OpKind::AddRow => "add_row",
        OpKind::MulRow => "mul_row",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::Scale => "scale",
        OpKind::Neg => "neg",
        OpKind::Relu => "relu",
        OpKind::Sigmoid => "sigmoid",
        OpKind::SoftmaxRows => "softmax_rows",
        OpKind::MaskedFill => "masked_fill",
        OpKind::Embedding => "embedding",
        OpKind::Sum => "sum",
        OpKind::Mean => "mean",
        OpKind::SumCols => "sum_cols",
        OpKind::ConcatCols => "concat_cols",
        OpKind::SliceCols => "slice_cols",
        OpKind::LayerNorm => "layer_norm",
        OpKind::Dropout => "dropout",
        OpKind::Transpose => "transpose",
        OpKind::Reshape => "reshape",
        OpKind::NormalizeRows => "normalize_rows",
        OpKind::BceWithLogits => "bce_with_logits",
        OpKind::Bce => "bce",
    }
}

// Drops saved buffers from ops whose output never needs a gradient.
fn strip<S>(op: Op<S>) -> Op<S> {
    match op {
        Op::MaskedFill { x, .. } => Op::MaskedFill { x, keep: Vec::new() },
        Op::Embedding { table, .. } => Op::Embedding { table, ids: Vec::new() },
        Op::LayerNorm { x, .. } => Op::LayerNorm { x, inv_std: Vec::new() },
        Op::Dropout { x, .. } => Op::Dropout { x, scale: Vec::new() },
        Op::NormalizeRows { x, .. } => Op::NormalizeRows { x, inv_norm: Vec::new() },
        Op::BceWithLogits { logits, .. } => Op::BceWithLogits { logits, targets: Vec::new() },
        Op::Bce { probs, eps, .. } => Op::Bce { probs, targets: Vec::new(), eps },
        other => other,
    }
}

fn zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip of equal shapes")
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(alloc::format!("dropout probability {p} outside [0, 1)")));
    }
    Ok(())
}

fn dropout_mask<S: Scalar>(len: usize, p: f64, seed: u64) -> Vec<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = S::of(1.0 / (1.0 - p));
    (0..len).map(|_| if rng.random::<f64>() < p { S::zero() } else { keep }).collect()
}

/// Inverted dropout on a plain tensor (no tape). Identity when `training` is
/// false or `p == 0`; deterministic given `seed`.
pub fn dropout<S: Scalar>(x: &Tensor<S>, p: f64, training: bool, seed: u64) -> Result<Tensor<S>> {
    check_dropout_p(p)?;
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<S>(x.len(), p, seed);
    let mut out = x.clone();
    for (o, m) in out.data_mut().iter_mut().zip(mask) {
        *o *= m;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let x = t(&[1, 3], &[2.5, 2.5, 2.5]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x, false);
        let s = tape.softmax_rows(v).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = t(&[3], &[-1.0, 0.0, 2.5]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x, false);
        let r = tape.relu(v).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn matmul_by_identity_is_identity() {
        let x = t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 9.0, -7.0]);
        let eye = Tensor::identity(3);
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(&x, false), tape.leaf(&eye, false));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::scalar(3.0f64);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let sq = tape.mul(v, v).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.wrt(v).item(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let x = Tensor::scalar(0.0f64);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let s = tape.sigmoid(v).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(v).item(), 0.25);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_pass() {
        let x = t(&[2], &[1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let r = tape.relu(v).unwrap();
        assert!(matches!(tape.backward(r), Err(Error::NotScalar(_))));
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s).err(), Some(Error::TapeConsumed));
    }

    #[test]
    fn unreachable_parameter_has_zero_gradient() {
        let x = t(&[2], &[1.0, 2.0]);
        let unused = t(&[2, 2], &[1.0; 4]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let u = tape.param(&unused);
        let s = tape.sum(v).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(u), Tensor::zeros([2, 2]));
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let x = Tensor::scalar(2.0f64);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let a = tape.scale(v, 3.0).unwrap();
        let b = tape.add(a, v).unwrap();
        let grads = tape.backward(b).unwrap();
        assert_eq!(grads.wrt(v).item(), 4.0);
    }

    #[test]
    fn shape_mismatch_and_non_finite_are_errors() {
        let a = t(&[2, 3], &[1.0; 6]);
        let b = t(&[2, 3], &[1.0; 6]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a, false), tape.leaf(&b, false));
        assert!(matches!(tape.matmul(va, vb), Err(Error::ShapeMismatch { .. })));
        let big = t(&[1], &[1e300]);
        let vbig = tape.leaf(&big, false);
        assert_eq!(tape.mul(vbig, vbig).err(), Some(Error::NonFinite { op: "mul" }));
    }

    #[test]
    fn recorded_inputs_precede_outputs() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut tape = Tape::new();
        let va = tape.param(&a);
        let m = tape.matmul(va, va).unwrap();
        let s = tape.softmax_rows(m).unwrap();
        let c = tape.concat_cols(&[s, va]).unwrap();
        let l = tape.sum(c).unwrap();
        for idx in 0..tape.len() {
            let v = Var(idx);
            assert!(tape.inputs_of(v).iter().all(|i| i.index() < idx));
        }
        assert_eq!(tape.op_kind(l), OpKind::Sum);
    }

    #[test]
    fn dropout_identity_cases_and_expectation() {
        let x = Tensor::full([100_000], 1.0f64);
        assert_eq!(dropout(&x, 0.0, true, 1).unwrap(), x);
        assert_eq!(dropout(&x, 0.2, false, 1).unwrap(), x);
        let d = dropout(&x, 0.5, true, 7).unwrap();
        let mean = d.sum() / d.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert_eq!(d, dropout(&x, 0.5, true, 7).unwrap());
        assert!(dropout(&x, 1.0, true, 1).is_err());
        assert!(dropout(&x, -0.1, true, 1).is_err());
    }
}
