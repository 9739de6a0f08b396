//! Dense tensors and a reverse-mode autodiff tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! creation order; [`Tape::backward`] walks that list once in reverse. The
//! op set is closed and small: exactly what the model needs, each with a
//! hand-written vector-Jacobian product.
//!
//! Elementwise binary ops broadcast only the right operand, and only when its
//! shape is a suffix of the left shape (bias rows, per-feature scales) or it is
//! a single element. Anything else goes through [`Var::expand`].

use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, Ref, RefCell};
use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;

/// Floating-point element type: `f32` for training, `f64` for verification.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Identity for `f32`, so NaN payloads survive storage.
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        f64::from(x)
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape was already consumed by a previous backward pass")]
    StaleTape,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(mismatch("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    /// Like [`Tensor::new`] but panics on a length mismatch.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        Self::new(shape, data).expect("tensor data length must match shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `i` when the tensor is viewed as `[len / last_dim, last_dim]`.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> usize {
        if self.data.is_empty() {
            0
        } else {
            self.data.len() / self.last_dim()
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(mismatch("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Raw kernels.

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn gemm_nt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// Eight independent lanes so the reduction vectorizes.
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            lanes[l] += a[l] * b[l];
        }
    }
    let mut acc = lanes.iter().fold(T::zero(), |s, &v| s + v);
    for (&a, &b) in xr.iter().zip(yr) {
        acc += a * b;
    }
    acc
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn gemm_tn_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Copy + Default>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    // Input stride of each output axis.
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// `[outer, n, inner]` view around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// Right operand repeats every `n` elements of the left.
    Suffix(usize),
}

fn bcast_kind(a: &[usize], b: &[usize], op: &'static str) -> Result<Bcast, TensorError> {
    if a == b {
        return Ok(Bcast::Same);
    }
    let bn: usize = b.iter().product();
    if bn == 1 {
        return Ok(Bcast::Scalar);
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Ok(Bcast::Suffix(bn));
    }
    Err(mismatch(op, a, b))
}

fn bcast_index(kind: Bcast, i: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Suffix(n) => i % n,
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Tape.

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, T),
    AddScalar(usize),
    MatMul { a: usize, b: usize, batched: bool },
    Transpose(usize),
    Permute { a: usize, perm: Vec<usize> },
    Reshape(usize),
    Expand { a: usize, axis: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Gather { table: usize, idx: Vec<usize> },
    IndexAdd { src: usize, idx: Vec<usize> },
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Silu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Sum { a: usize, axis: usize },
    Mean { a: usize, axis: usize },
    SumAll(usize),
    Max { a: usize, axis: usize, argmax: Vec<usize> },
    MaskedFill { a: usize, mask: Vec<bool> },
    Dropout { a: usize, keep: Vec<T> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<T> },
    BceWithLogits { logits: usize, targets: Vec<T> },
    Mse { a: usize, b: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    stale: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> Debug for Var<'_, T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var<'_, T>) -> Tensor<T> {
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.shape()),
        }
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Tensor<T> {
        match self.grads.get_mut(v.id).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(v.shape()),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            stale: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a single-element loss. Marks the tape stale.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        let grads = self.backward_retain(loss)?;
        self.stale.set(true);
        Ok(grads)
    }

    /// Reverse pass that leaves the tape usable for another backward.
    pub fn backward_retain(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        if self.stale.get() {
            return Err(TensorError::StaleTape);
        }
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape.clone();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(shape, T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, shape: &[usize], f: impl FnOnce(&mut [T])) {
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
    f(&mut slot.data);
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let out = &nodes[id].value;
    let gd = &g.data;
    let needs = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b, k) | Op::Sub(a, b, k) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -T::one() } else { T::one() };
            if needs(*a) {
                accumulate(grads, *a, &val(*a).shape, |ga| {
                    for (x, &y) in ga.iter_mut().zip(gd) {
                        *x += y;
                    }
                });
            }
            if needs(*b) {
                let k = *k;
                accumulate(grads, *b, &val(*b).shape, |gb| {
                    for (i, &y) in gd.iter().enumerate() {
                        gb[bcast_index(k, i)] += sign * y;
                    }
                });
            }
        }
        Op::Mul(a, b, k) => {
            let (av, bv, k) = (&val(*a).data, &val(*b).data, *k);
            if needs(*a) {
                accumulate(grads, *a, &val(*a).shape, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += gd[i] * bv[bcast_index(k, i)];
                    }
                });
            }
            if needs(*b) {
                accumulate(grads, *b, &val(*b).shape, |gb| {
                    for (i, &y) in gd.iter().enumerate() {
                        gb[bcast_index(k, i)] += y * av[i];
                    }
                });
            }
        }
        Op::Scale(a, s) => {
            let s = *s;
            accumulate(grads, *a, &val(*a).shape, |ga| {
                for (x, &y) in ga.iter_mut().zip(gd) {
                    *x += s * y;
                }
            });
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            accumulate(grads, *a, &val(*a).shape, |ga| {
                for (x, &y) in ga.iter_mut().zip(gd) {
                    *x += y;
                }
            });
        }
        Op::MatMul { a, b, batched } => {
            let (at, bt) = (val(*a), val(*b));
            let k = at.last_dim();
            let n = bt.last_dim();
            if *batched {
                let m = at.shape[at.rank() - 2];
                let batch = at.len() / (m * k);
                if needs(*a) {
                    accumulate(grads, *a, &at.shape, |ga| {
                        for bi in 0..batch {
                            gemm_nt_acc(
                                &gd[bi * m * n..(bi + 1) * m * n],
                                &bt.data[bi * k * n..(bi + 1) * k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
                if needs(*b) {
                    accumulate(grads, *b, &bt.shape, |gb| {
                        for bi in 0..batch {
                            gemm_tn_acc(
                                &at.data[bi * m * k..(bi + 1) * m * k],
                                &gd[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            } else {
                let m = at.len() / k;
                if needs(*a) {
                    accumulate(grads, *a, &at.shape, |ga| gemm_nt_acc(gd, &bt.data, ga, m, k, n));
                }
                if needs(*b) {
                    accumulate(grads, *b, &bt.shape, |gb| gemm_tn_acc(&at.data, gd, gb, m, k, n));
                }
            }
        }
        Op::Transpose(a) => {
            let r = g.rank();
            let mut perm: Vec<usize> = (0..r).collect();
            perm.swap(r - 2, r - 1);
            let (back, _) = permute_data(gd, &g.shape, &perm);
            accumulate(grads, *a, &val(*a).shape, |ga| {
                for (x, y) in ga.iter_mut().zip(back) {
                    *x += y;
                }
            });
        }
        Op::Permute { a, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (back, _) = permute_data(gd, &g.shape, &inv);
            accumulate(grads, *a, &val(*a).shape, |ga| {
                for (x, y) in ga.iter_mut().zip(back) {
                    *x += y;
                }
            });
        }
        Op::Expand { a, axis } => {
            let (outer, n, inner) = axis_split(&out.shape, *axis);
            accumulate(grads, *a, &val(*a).shape, |ga| {
                for o in 0..outer {
                    for j in 0..n {
                        let src = &gd[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (x, &y) in ga[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
            });
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = axis_split(&out.shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let pn = val(p).shape[*axis];
                if needs(p) {
                    accumulate(grads, p, &val(p).shape, |gp| {
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + pn) * inner];
                            for (x, &y) in gp[o * pn * inner..(o + 1) * pn * inner].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                }
                offset += pn;
            }
        }
        Op::Slice { a, axis, start } => {
            let src_shape = &val(*a).shape;
            let (outer, total, inner) = axis_split(src_shape, *axis);
            let len = out.shape[*axis];
            accumulate(grads, *a, src_shape, |ga| {
                for o in 0..outer {
                    let dst = &mut ga[(o * total + start) * inner..(o * total + start + len) * inner];
                    for (x, &y) in dst.iter_mut().zip(&gd[o * len * inner..(o + 1) * len * inner]) {
                        *x += y;
                    }
                }
            });
        }
        Op::Gather { table, idx } => {
            let w = val(*table).last_dim();
            accumulate(grads, *table, &val(*table).shape, |gt| {
                for (r, &src) in idx.iter().enumerate() {
                    for (x, &y) in gt[src * w..(src + 1) * w].iter_mut().zip(&gd[r * w..(r + 1) * w]) {
                        *x += y;
                    }
                }
            });
        }
        Op::IndexAdd { src, idx } => {
            let w = out.last_dim();
            accumulate(grads, *src, &val(*src).shape, |gs| {
                for (r, &dst) in idx.iter().enumerate() {
                    for (x, &y) in gs[r * w..(r + 1) * w].iter_mut().zip(&gd[dst * w..(dst + 1) * w]) {
                        *x += y;
                    }
                }
            });
        }
        Op::Softmax(a) => {
            let w = out.last_dim();
            accumulate(grads, *a, &out.shape, |ga| {
                for r in 0..out.rows() {
                    let y = &out.data[r * w..(r + 1) * w];
                    let gy = &gd[r * w..(r + 1) * w];
                    let dot: T = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                    for j in 0..w {
                        ga[r * w + j] += y[j] * (gy[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let w = out.last_dim();
            let rows = out.rows();
            let gam = &val(*gamma).data;
            if needs(*gamma) {
                accumulate(grads, *gamma, &val(*gamma).shape, |gg| {
                    for r in 0..rows {
                        for j in 0..w {
                            gg[j] += gd[r * w + j] * xhat[r * w + j];
                        }
                    }
                });
            }
            if needs(*beta) {
                accumulate(grads, *beta, &val(*beta).shape, |gb| {
                    for r in 0..rows {
                        for j in 0..w {
                            gb[j] += gd[r * w + j];
                        }
                    }
                });
            }
            if needs(*x) {
                let wn = T::of(w as f64);
                accumulate(grads, *x, &val(*x).shape, |gx| {
                    for r in 0..rows {
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..w {
                            let dxh = gd[r * w + j] * gam[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[r * w + j];
                        }
                        for j in 0..w {
                            let dxh = gd[r * w + j] * gam[j];
                            gx[r * w + j] += rstd[r] / wn * (wn * dxh - sum_dxh - xhat[r * w + j] * sum_dxh_xh);
                        }
                    }
                });
            }
        }
        Op::Silu(a) => {
            let av = &val(*a).data;
            accumulate(grads, *a, &out.shape, |ga| {
                for i in 0..ga.len() {
                    let s = sigmoid(av[i]);
                    ga[i] += gd[i] * s * (T::one() + av[i] * (T::one() - s));
                }
            });
        }
        Op::Sigmoid(a) => {
            accumulate(grads, *a, &out.shape, |ga| {
                for i in 0..ga.len() {
                    let s = out.data[i];
                    ga[i] += gd[i] * s * (T::one() - s);
                }
            });
        }
        Op::Tanh(a) => {
            accumulate(grads, *a, &out.shape, |ga| {
                for i in 0..ga.len() {
                    let t = out.data[i];
                    ga[i] += gd[i] * (T::one() - t * t);
                }
            });
        }
        Op::Relu(a) => {
            let av = &val(*a).data;
            accumulate(grads, *a, &out.shape, |ga| {
                for i in 0..ga.len() {
                    if av[i] > T::zero() {
                        ga[i] += gd[i];
                    }
                }
            });
        }
        Op::Sum { a, axis } | Op::Mean { a, axis } => {
            let src_shape = &val(*a).shape;
            let (outer, n, inner) = axis_split(src_shape, *axis);
            let scale = if matches!(nodes[id].op, Op::Mean { .. }) {
                T::one() / T::of(n as f64)
            } else {
                T::one()
            };
            accumulate(grads, *a, src_shape, |ga| {
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            ga[(o * n + j) * inner + i] += scale * gd[o * inner + i];
                        }
                    }
                }
            });
        }
        Op::SumAll(a) => {
            let g0 = gd[0];
            accumulate(grads, *a, &val(*a).shape, |ga| {
                for x in ga.iter_mut() {
                    *x += g0;
                }
            });
        }
        Op::Max { a, axis, argmax } => {
            let src_shape = &val(*a).shape;
            let (_, n, inner) = axis_split(src_shape, *axis);
            accumulate(grads, *a, src_shape, |ga| {
                for (slot, &j) in argmax.iter().enumerate() {
                    let (o, i) = (slot / inner, slot % inner);
                    ga[(o * n + j) * inner + i] += gd[slot];
                }
            });
        }
        Op::MaskedFill { a, mask } => {
            accumulate(grads, *a, &out.shape, |ga| {
                for i in 0..ga.len() {
                    if !mask[i] {
                        ga[i] += gd[i];
                    }
                }
            });
        }
        Op::Dropout { a, keep } => {
            accumulate(grads, *a, &out.shape, |ga| {
                for i in 0..ga.len() {
                    ga[i] += gd[i] * keep[i];
                }
            });
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let c = val(*logits).last_dim();
            let scale = gd[0] / T::of(targets.len() as f64);
            accumulate(grads, *logits, &val(*logits).shape, |gl| {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let ind = if j == t { T::one() } else { T::zero() };
                        gl[r * c + j] += scale * (probs[r * c + j] - ind);
                    }
                }
            });
        }
        Op::BceWithLogits { logits, targets } => {
            let lv = &val(*logits).data;
            let scale = gd[0] / T::of(targets.len() as f64);
            accumulate(grads, *logits, &val(*logits).shape, |gl| {
                for i in 0..gl.len() {
                    gl[i] += scale * (sigmoid(lv[i]) - targets[i]);
                }
            });
        }
        Op::Mse { a, b } => {
            let (av, bv) = (&val(*a).data, &val(*b).data);
            let scale = T::of(2.0) * gd[0] / T::of(av.len() as f64);
            if needs(*a) {
                accumulate(grads, *a, &val(*a).shape, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += scale * (av[i] - bv[i]);
                    }
                });
            }
            if needs(*b) {
                accumulate(grads, *b, &val(*b).shape, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= scale * (av[i] - bv[i]);
                    }
                });
            }
        }
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

/// `log(1 + e^x)` without overflow.
fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// Forward ops.

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape.clone()
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id).clone()
    }

    /// Borrow the current value without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.value(self.id))
    }

    /// First element, for scalar results.
    pub fn item(&self) -> T {
        self.tape.value(self.id).data[0]
    }

    fn requires(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn unary(self, op: Op<T>, value: Tensor<T>) -> Var<'t, T> {
        let rg = self.requires();
        self.tape.push(value, op, rg)
    }

    fn map(self, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.tape.value(self.id);
        Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(usize, usize, Bcast) -> Op<T>,
    ) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
            let kind = bcast_kind(&a.shape, &b.shape, name)?;
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data[bcast_index(kind, i)]))
                .collect();
            (Tensor { shape: a.shape.clone(), data }, kind)
        };
        let rg = self.requires() || other.requires();
        Ok(self.tape.push(value.0, make(self.id, other.id, value.1), rg))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let v = self.map(|x| x * s);
        self.unary(Op::Scale(self.id, s), v)
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let v = self.map(|x| x + s);
        self.unary(Op::AddScalar(self.id), v)
    }

    /// `[.., m, k] x [k, n]` (shared right operand) or `[B.., m, k] x [B.., k, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (value, batched) = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
            if a.rank() < 2 || b.rank() < 2 {
                return Err(mismatch("matmul", &a.shape, &b.shape));
            }
            let k = a.last_dim();
            let (bk, n) = (b.shape[b.rank() - 2], b.last_dim());
            if k != bk {
                return Err(mismatch("matmul", &a.shape, &b.shape));
            }
            if b.rank() == 2 {
                let m = a.len() / k;
                let mut out = vec![T::zero(); m * n];
                gemm_acc(&a.data, &b.data, &mut out, m, k, n);
                let mut shape = a.shape.clone();
                *shape.last_mut().unwrap() = n;
                (Tensor { shape, data: out }, false)
            } else {
                if a.rank() != b.rank() || a.shape[..a.rank() - 2] != b.shape[..b.rank() - 2] {
                    return Err(mismatch("matmul", &a.shape, &b.shape));
                }
                let m = a.shape[a.rank() - 2];
                let batch = a.len() / (m * k);
                let mut out = vec![T::zero(); batch * m * n];
                for bi in 0..batch {
                    gemm_acc(
                        &a.data[bi * m * k..(bi + 1) * m * k],
                        &b.data[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                let mut shape = a.shape.clone();
                *shape.last_mut().unwrap() = n;
                (Tensor { shape, data: out }, true)
            }
        };
        let rg = self.requires() || other.requires();
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batched,
            },
            rg,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(self) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let a = self.tape.value(self.id);
            let r = a.rank();
            if r < 2 {
                return Err(TensorError::InvalidAxis {
                    op: "transpose",
                    axis: 1,
                    rank: r,
                });
            }
            let mut perm: Vec<usize> = (0..r).collect();
            perm.swap(r - 2, r - 1);
            let (data, shape) = permute_data(&a.data, &a.shape, &perm);
            Tensor { shape, data }
        };
        Ok(self.unary(Op::Transpose(self.id), value))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let a = self.tape.value(self.id);
            let mut seen = vec![false; a.rank()];
            if perm.len() != a.rank() {
                return Err(mismatch("permute", &a.shape, perm));
            }
            for &p in perm {
                if p >= a.rank() || seen[p] {
                    return Err(TensorError::InvalidAxis {
                        op: "permute",
                        axis: p,
                        rank: a.rank(),
                    });
                }
                seen[p] = true;
            }
            let (data, shape) = permute_data(&a.data, &a.shape, perm);
            Tensor { shape, data }
        };
        Ok(self.unary(
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
            value,
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let value = self.value().reshape(shape.to_vec())?;
        Ok(self.unary(Op::Reshape(self.id), value))
    }

    /// Insert a new axis at `axis` and repeat the tensor `n` times along it.
    pub fn expand(self, axis: usize, n: usize) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let a = self.tape.value(self.id);
            if axis > a.rank() {
                return Err(TensorError::InvalidAxis {
                    op: "expand",
                    axis,
                    rank: a.rank(),
                });
            }
            let outer: usize = a.shape[..axis].iter().product();
            let inner: usize = a.shape[axis..].iter().product();
            let mut data = Vec::with_capacity(a.len() * n);
            for o in 0..outer {
                for _ in 0..n {
                    data.extend_from_slice(&a.data[o * inner..(o + 1) * inner]);
                }
            }
            let mut shape = a.shape.clone();
            shape.insert(axis, n);
            Tensor { shape, data }
        };
        Ok(self.unary(Op::Expand { a: self.id, axis }, value))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>, TensorError> {
        let tape = parts.first().expect("concat of zero tensors").tape;
        let value = {
            let vals: Vec<Ref<'_, Tensor<T>>> = parts.iter().map(|p| tape.value(p.id)).collect();
            let rank = vals[0].rank();
            if axis >= rank {
                return Err(TensorError::InvalidAxis { op: "concat", axis, rank });
            }
            for v in &vals[1..] {
                let same = v.rank() == rank
                    && (0..rank).all(|d| d == axis || v.shape[d] == vals[0].shape[d]);
                if !same {
                    return Err(mismatch("concat", &vals[0].shape, &v.shape));
                }
            }
            let total: usize = vals.iter().map(|v| v.shape[axis]).sum();
            let (outer, _, inner) = axis_split(&vals[0].shape, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let n = v.shape[axis];
                    data.extend_from_slice(&v.data[o * n * inner..(o + 1) * n * inner]);
                }
            }
            let mut shape = vals[0].shape.clone();
            shape[axis] = total;
            Tensor { shape, data }
        };
        let rg = parts.iter().any(|p| p.requires());
        Ok(tape.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let a = self.tape.value(self.id);
            if axis >= a.rank() {
                return Err(TensorError::InvalidAxis {
                    op: "slice",
                    axis,
                    rank: a.rank(),
                });
            }
            if start + len > a.shape[axis] {
                return Err(TensorError::IndexOutOfRange {
                    op: "slice",
                    index: start + len,
                    bound: a.shape[axis],
                });
            }
            let (outer, total, inner) = axis_split(&a.shape, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&a.data[(o * total + start) * inner..(o * total + start + len) * inner]);
            }
            let mut shape = a.shape.clone();
            shape[axis] = len;
            Tensor { shape, data }
        };
        Ok(self.unary(
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            value,
        ))
    }

    /// Rows of a `[n, w]` table selected by `idx`: output `[idx.len(), w]`.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let t = self.tape.value(self.id);
            let w = t.last_dim();
            let n = t.rows();
            let mut data = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                if i >= n {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather_rows",
                        index: i,
                        bound: n,
                    });
                }
                data.extend_from_slice(&t.data[i * w..(i + 1) * w]);
            }
            Tensor {
                shape: vec![idx.len(), w],
                data,
            }
        };
        Ok(self.unary(
            Op::Gather {
                table: self.id,
                idx: idx.to_vec(),
            },
            value,
        ))
    }

    /// Scatter-add: row `r` of `self` is added into output row `idx[r]`;
    /// output is `[out_rows, w]`.
    pub fn index_add(self, idx: &[usize], out_rows: usize) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let s = self.tape.value(self.id);
            let w = s.last_dim();
            if idx.len() != s.rows() {
                return Err(mismatch("index_add", &s.shape, &[idx.len()]));
            }
            let mut data = vec![T::zero(); out_rows * w];
            for (r, &dst) in idx.iter().enumerate() {
                if dst >= out_rows {
                    return Err(TensorError::IndexOutOfRange {
                        op: "index_add",
                        index: dst,
                        bound: out_rows,
                    });
                }
                for (x, &y) in data[dst * w..(dst + 1) * w].iter_mut().zip(&s.data[r * w..(r + 1) * w]) {
                    *x += y;
                }
            }
            Tensor {
                shape: vec![out_rows, w],
                data,
            }
        };
        Ok(self.unary(
            Op::IndexAdd {
                src: self.id,
                idx: idx.to_vec(),
            },
            value,
        ))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(self) -> Var<'t, T> {
        let value = {
            let a = self.tape.value(self.id);
            let w = a.last_dim();
            let mut data = a.data.clone();
            for row in data.chunks_mut(w) {
                let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let mut s = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x = *x / s;
                }
            }
            Tensor {
                shape: a.shape.clone(),
                data,
            }
        };
        self.unary(Op::Softmax(self.id), value)
    }

    /// Normalize the last axis, then apply `gamma * x + beta` (both `[w]`).
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (value, xhat, rstd) = {
            let (a, g, b) = (
                self.tape.value(self.id),
                self.tape.value(gamma.id),
                self.tape.value(beta.id),
            );
            let w = a.last_dim();
            if g.shape != [w] || b.shape != [w] {
                return Err(mismatch("layer_norm", &a.shape, &g.shape));
            }
            let rows = a.rows();
            let mut out = vec![T::zero(); a.len()];
            let mut xhat = vec![T::zero(); a.len()];
            let mut rstd = vec![T::zero(); rows];
            let wn = T::of(w as f64);
            for r in 0..rows {
                let row = &a.data[r * w..(r + 1) * w];
                let mean = row.iter().copied().sum::<T>() / wn;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / wn;
                let rs = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
                rstd[r] = rs;
                for j in 0..w {
                    let xh = (row[j] - mean) * rs;
                    xhat[r * w + j] = xh;
                    out[r * w + j] = xh * g.data[j] + b.data[j];
                }
            }
            (
                Tensor {
                    shape: a.shape.clone(),
                    data: out,
                },
                xhat,
                rstd,
            )
        };
        let rg = self.requires() || gamma.requires() || beta.requires();
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn silu(self) -> Var<'t, T> {
        let v = self.map(|x| x * sigmoid(x));
        self.unary(Op::Silu(self.id), v)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let v = self.map(sigmoid);
        self.unary(Op::Sigmoid(self.id), v)
    }

    pub fn tanh(self) -> Var<'t, T> {
        let v = self.map(|x| x.tanh());
        self.unary(Op::Tanh(self.id), v)
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(Op::Relu(self.id), v)
    }

    fn reduce(self, axis: usize, name: &'static str, mean: bool) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let a = self.tape.value(self.id);
            if axis >= a.rank() {
                return Err(TensorError::InvalidAxis {
                    op: name,
                    axis,
                    rank: a.rank(),
                });
            }
            let (outer, n, inner) = axis_split(&a.shape, axis);
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        data[o * inner + i] += a.data[(o * n + j) * inner + i];
                    }
                }
            }
            if mean {
                let nn = T::of(n as f64);
                for x in data.iter_mut() {
                    *x = *x / nn;
                }
            }
            let mut shape = a.shape.clone();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor { shape, data }
        };
        let op = if mean {
            Op::Mean { a: self.id, axis }
        } else {
            Op::Sum { a: self.id, axis }
        };
        Ok(self.unary(op, value))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        self.reduce(axis, "sum_axis", false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        self.reduce(axis, "mean_axis", true)
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.with_value(|a| a.data.iter().copied().sum()));
        self.unary(Op::SumAll(self.id), v)
    }

    /// Max over `axis`, removing it; ties resolve to the first index.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let (value, argmax) = {
            let a = self.tape.value(self.id);
            if axis >= a.rank() {
                return Err(TensorError::InvalidAxis {
                    op: "max_axis",
                    axis,
                    rank: a.rank(),
                });
            }
            let (outer, n, inner) = axis_split(&a.shape, axis);
            let mut data = vec![T::neg_infinity(); outer * inner];
            let mut arg = vec![0usize; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        let x = a.data[(o * n + j) * inner + i];
                        if x > data[o * inner + i] {
                            data[o * inner + i] = x;
                            arg[o * inner + i] = j;
                        }
                    }
                }
            }
            let mut shape = a.shape.clone();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            (Tensor { shape, data }, arg)
        };
        Ok(self.unary(
            Op::Max {
                a: self.id,
                axis,
                argmax,
            },
            value,
        ))
    }

    /// Replace entries where `mask` is true by `fill`.
    pub fn masked_fill(self, mask: &[bool], fill: T) -> Result<Var<'t, T>, TensorError> {
        let value = {
            let a = self.tape.value(self.id);
            if mask.len() != a.len() {
                return Err(mismatch("masked_fill", &a.shape, &[mask.len()]));
            }
            let data = a
                .data
                .iter()
                .zip(mask)
                .map(|(&x, &m)| if m { fill } else { x })
                .collect();
            Tensor {
                shape: a.shape.clone(),
                data,
            }
        };
        Ok(self.unary(
            Op::MaskedFill {
                a: self.id,
                mask: mask.to_vec(),
            },
            value,
        ))
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, rng: &mut R) -> Var<'t, T> {
        if p <= 0.0 {
            return self;
        }
        let n = self.with_value(Tensor::len);
        let scale = T::of(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
            .collect();
        let value = {
            let a = self.tape.value(self.id);
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&keep).map(|(&x, &k)| x * k).collect(),
            }
        };
        self.unary(Op::Dropout { a: self.id, keep }, value)
    }

    /// Mean cross-entropy of `[N, C]` logits against class indices.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let (loss, probs) = {
            let l = self.tape.value(self.id);
            let c = l.last_dim();
            if l.rank() != 2 || targets.len() != l.rows() || targets.is_empty() {
                return Err(mismatch("cross_entropy", &l.shape, &[targets.len()]));
            }
            let mut probs = l.data.clone();
            let mut total = T::zero();
            for (r, &t) in targets.iter().enumerate() {
                if t >= c {
                    return Err(TensorError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: t,
                        bound: c,
                    });
                }
                let row = &mut probs[r * c..(r + 1) * c];
                let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
                total += lse - row[t];
                for x in row.iter_mut() {
                    *x = (*x - lse).exp();
                }
            }
            (total / T::of(targets.len() as f64), probs)
        };
        Ok(self.unary(
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Mean binary cross-entropy of logits against 0/1 targets.
    pub fn bce_with_logits(self, targets: &[T]) -> Result<Var<'t, T>, TensorError> {
        let loss = {
            let l = self.tape.value(self.id);
            if targets.len() != l.len() || targets.is_empty() {
                return Err(mismatch("bce_with_logits", &l.shape, &[targets.len()]));
            }
            let total: T = l
                .data
                .iter()
                .zip(targets)
                .map(|(&x, &y)| softplus(x) - y * x)
                .sum();
            total / T::of(targets.len() as f64)
        };
        Ok(self.unary(
            Op::BceWithLogits {
                logits: self.id,
                targets: targets.to_vec(),
            },
            Tensor::scalar(loss),
        ))
    }

    /// Mean squared error against a same-shaped tensor.
    pub fn mse(self, target: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let loss = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(target.id));
            if a.shape != b.shape {
                return Err(mismatch("mse", &a.shape, &b.shape));
            }
            let total: T = a.data.iter().zip(&b.data).map(|(&x, &y)| (x - y) * (x - y)).sum();
            total / T::of(a.len() as f64)
        };
        let rg = self.requires() || target.requires();
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::Mse {
                a: self.id,
                b: target.id,
            },
            rg,
        ))
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check.

/// Which parameter coordinates [`grad_check`] perturbs.
#[derive(Clone, Copy, Debug)]
pub enum CheckCoords {
    All,
    /// Up to `per_tensor` seeded coordinates from every parameter tensor.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    /// `(analytic, numeric)` derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of `f` against central differences
/// `(f(θ+h) - f(θ-h)) / 2h`.
pub fn grad_check<F, E>(f: F, params: &[Tensor<f64>], h: f64, coords: CheckCoords) -> Result<GradCheckReport, E>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, E>,
    E: From<TensorError>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.get(v)).collect()
    };
    let eval = |ps: &[Tensor<f64>]| -> Result<f64, E> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = ps.iter().map(|p| tape.param(p.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut rng = match coords {
        CheckCoords::Sample { seed, .. } => Some(<rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed)),
        CheckCoords::All => None,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for pi in 0..params.len() {
        let n = params[pi].len();
        let picks: Vec<usize> = match (coords, rng.as_mut()) {
            (CheckCoords::Sample { per_tensor, .. }, Some(r)) if per_tensor < n => {
                (0..per_tensor).map(|_| r.random_range(0..n)).collect()
            }
            _ => (0..n).collect(),
        };
        for c in picks {
            let orig = work[pi].data[c];
            work[pi].data[c] = orig + h;
            let up = eval(&work)?;
            work[pi].data[c] = orig - h;
            let down = eval(&work)?;
            work[pi].data[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[pi].data[c], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, c);
                report.worst_values = (analytic[pi].data[c], numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec())
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn check<F>(f: F, params: &[Tensor<f64>]) -> f64
    where
        F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>,
    {
        grad_check(f, params, 1e-6, CheckCoords::All).unwrap().max_rel_error
    }

    /// Fixed random projection so every output element matters to the loss.
    fn project<'t>(v: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>, TensorError> {
        let w = random(&v.shape(), seed);
        Ok(v.mul(v.tape().constant(w))?.sum_all())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::<f64>::new();
        let s = tape.constant(t(&[2], &[0.0, 0.0])).softmax();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 4], &[3.0; 4]));
        let y = x
            .layer_norm(tape.constant(Tensor::full(vec![4], 1.0)), tape.constant(Tensor::zeros(vec![4])))
            .unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn integer_matmul() {
        // [1 2 3; 4 5 6] x [7 8; 9 10; 11 12] = [58 64; 139 154]
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.constant(t(&[3, 2], &[7., 8., 9., 10., 11., 12.]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn square_derivative() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[3.0]));
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[6.0]);
    }

    #[test]
    fn weight_gradient_is_broadcast_input() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[1.0, -2.0, 0.5]));
        let w = tape.param(random(&[3, 2], 1));
        let y = x.matmul(w).unwrap().sum_all();
        let g = tape.backward(y).unwrap().get(w);
        assert_eq!(g.data(), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert_eq!(tape.backward(x).err(), Some(TensorError::NonScalarLoss(vec![2])));
        let s = x.sum_all();
        assert!(tape.backward_retain(s).is_ok());
        assert!(tape.backward(s).is_ok());
        assert_eq!(tape.backward(s).err(), Some(TensorError::StaleTape));
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(a.add(b), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(a.matmul(a), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(a.sum_axis(2), Err(TensorError::InvalidAxis { .. })));
        assert!(matches!(a.gather_rows(&[5]), Err(TensorError::IndexOutOfRange { .. })));
    }

    #[test]
    fn index_add_matches_loop() {
        let src = random(&[7, 3], 5);
        let idx = [2, 0, 2, 1, 0, 2, 3];
        let tape = Tape::<f64>::new();
        let out = tape.constant(src.clone()).index_add(&idx, 4).unwrap().value();
        let mut expected = vec![0.0; 12];
        for (r, &d) in idx.iter().enumerate() {
            for j in 0..3 {
                expected[d * 3 + j] += src.data()[r * 3 + j];
            }
        }
        assert_eq!(out.data(), &expected[..]);
    }

    #[test]
    fn masked_softmax_assigns_zero_mass() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[0.3, 2.0, -1.0]));
        let p = x.masked_fill(&[false, true, false], -1e9).unwrap().softmax().value();
        assert_eq!(p.data()[1], 0.0);
        assert!((p.data()[0] + p.data()[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradcheck_linear_mse() {
        let x = random(&[4, 3], 2);
        let y = random(&[4, 2], 3);
        let err = check(
            |tape, p| {
                let out = tape.constant(x.clone()).matmul(p[0])?.add(p[1])?;
                out.mse(tape.constant(y.clone()))
            },
            &[random(&[3, 2], 4), random(&[2], 5)],
        );
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn gradcheck_each_op() {
        type F = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>;
        let cases: Vec<(&str, F, Vec<Tensor<f64>>)> = vec![
            ("add_bcast", |_, p| project(p[0].add(p[1])?, 9), vec![random(&[3, 4], 1), random(&[4], 2)]),
            ("sub_scalar", |_, p| project(p[0].sub(p[1])?, 9), vec![random(&[3, 4], 1), random(&[1], 2)]),
            ("mul_bcast", |_, p| project(p[0].mul(p[1])?, 9), vec![random(&[2, 3, 4], 1), random(&[3, 4], 2)]),
            ("scale_shift", |_, p| project(p[0].scale(-1.7).add_scalar(0.3), 9), vec![random(&[5], 1)]),
            ("matmul_shared", |_, p| project(p[0].matmul(p[1])?, 9), vec![random(&[2, 3, 4], 1), random(&[4, 5], 2)]),
            ("matmul_batched", |_, p| project(p[0].matmul(p[1])?, 9), vec![random(&[2, 3, 4], 1), random(&[2, 4, 2], 2)]),
            ("transpose", |_, p| project(p[0].transpose()?, 9), vec![random(&[2, 3, 4], 1)]),
            ("permute", |_, p| project(p[0].permute(&[2, 0, 3, 1])?, 9), vec![random(&[2, 3, 2, 4], 1)]),
            ("reshape", |_, p| project(p[0].reshape(&[6, 2])?, 9), vec![random(&[3, 4], 1)]),
            ("expand", |_, p| project(p[0].expand(1, 3)?, 9), vec![random(&[2, 4], 1)]),
            ("concat0", |_, p| project(Var::concat(&[p[0], p[1]], 0)?, 9), vec![random(&[2, 3], 1), random(&[1, 3], 2)]),
            ("concat1", |_, p| project(Var::concat(&[p[0], p[1]], 1)?, 9), vec![random(&[2, 3], 1), random(&[2, 2], 2)]),
            ("slice", |_, p| project(p[0].slice(1, 1, 2)?, 9), vec![random(&[2, 4, 3], 1)]),
            ("gather", |_, p| project(p[0].gather_rows(&[2, 0, 2, 1])?, 9), vec![random(&[3, 4], 1)]),
            ("index_add", |_, p| project(p[0].index_add(&[1, 0, 1, 2], 3)?, 9), vec![random(&[4, 2], 1)]),
            ("softmax", |_, p| project(p[0].softmax(), 9), vec![random(&[3, 5], 1)]),
            (
                "layer_norm",
                |_, p| project(p[0].layer_norm(p[1], p[2])?, 9),
                vec![random(&[3, 5], 1), random(&[5], 2), random(&[5], 3)],
            ),
            ("silu", |_, p| project(p[0].silu(), 9), vec![random(&[3, 4], 1)]),
            ("sigmoid", |_, p| project(p[0].sigmoid(), 9), vec![random(&[3, 4], 1)]),
            ("tanh", |_, p| project(p[0].tanh(), 9), vec![random(&[3, 4], 1)]),
            (
                "relu",
                |_, p| project(p[0].relu(), 9),
                vec![t(&[6], &[0.5, -0.3, 0.2, -0.9, 1.1, -0.15])],
            ),
            ("sum_axis", |_, p| project(p[0].sum_axis(1)?, 9), vec![random(&[2, 3, 4], 1)]),
            ("mean_axis", |_, p| project(p[0].mean_axis(0)?, 9), vec![random(&[2, 3, 4], 1)]),
            ("max_axis", |_, p| project(p[0].max_axis(1)?, 9), vec![t(&[2, 3], &[0.1, 0.9, -0.4, 0.7, -0.2, 0.3])]),
            (
                "masked_fill",
                |_, p| project(p[0].masked_fill(&[true, false, false, true], 0.0)?, 9),
                vec![random(&[2, 2], 1)],
            ),
            ("cross_entropy", |_, p| p[0].cross_entropy(&[2, 0, 1]), vec![random(&[3, 4], 1)]),
            ("bce", |_, p| p[0].bce_with_logits(&[1.0, 0.0, 1.0, 0.0]), vec![random(&[2, 2], 1)]),
            ("mse", |_, p| p[0].mse(p[1]), vec![random(&[2, 3], 1), random(&[2, 3], 2)]),
        ];
        for (name, f, params) in cases {
            let err = check(f, &params);
            assert!(err < 1e-6, "{name}: relative error {err}");
        }
    }

    #[test]
    fn dropout_is_deterministic_and_unbiased_in_expectation() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![20_000], 1.0));
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = x.dropout(0.1, &mut r1).value();
        let b = x.dropout(0.1, &mut r2).value();
        assert_eq!(a, b);
        let mean = a.data().iter().sum::<f64>() / 20_000.0;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn gradients_of_unused_leaf_are_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let g = tape.backward(x.sum_all()).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0; 3]);
    }
}
