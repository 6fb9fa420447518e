//! Tape-based reverse-mode differentiation over dense [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly: each call computes its output
//! value immediately and appends a node that remembers its inputs and any
//! values the backward pass needs. Nodes are appended in evaluation order, so
//! the tape is topologically sorted by construction and [`Graph::backward`]
//! is a single reverse sweep.
//!
//! ```
//! use jhcodec::autodiff::Graph;
//! use jhcodec::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.input(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```
//!
//! Parameters are borrowed from a [`ParamStore`]. A graph built with
//! [`Graph::with_trainable`] tracks gradients for that store's trainable
//! entries; tensors from any other store enter as constants, which is how a
//! frozen feature extractor participates in a loss without receiving updates.

mod kernels;

use std::borrow::Cow;
use std::collections::HashMap;

use rustfft::num_complex::Complex;

use crate::Real;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

pub use kernels::hann_window;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a windowed causal attention call.
///
/// Query row `i` sits at absolute position `q_pos0 + i`, key row `j` at
/// `k_pos0 + j`. A query attends to keys at positions `p` with
/// `query_pos - window < p <= query_pos`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnLayout {
    pub heads: usize,
    pub window: usize,
    pub q_pos0: usize,
    pub k_pos0: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, Real),
    Silu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Real>,
        rstd: Vec<Real>,
    },
    Sum(Var),
    Mean(Var),
    MeanAbs(Var),
    SumSq(Var),
    LogEps(Var, Real),
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    StraightThrough(Var),
    MaskRows {
        x: Var,
        token: Var,
        mask: Vec<bool>,
    },
    Rope {
        x: Var,
        heads: usize,
        pos0: usize,
        base: Real,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        spans: Vec<(usize, usize)>,
        probs: Vec<Real>,
    },
    StftMagnitude {
        x: Var,
        fft: usize,
        hop: usize,
        spectra: Vec<Complex<Real>>,
    },
    CosineDistance {
        a: Var,
        b: Var,
        eps: Real,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    trainable: Option<&'a ParamStore>,
    bound: HashMap<(usize, usize), Var>,
    trainable_params: Vec<(ParamId, Var)>,
    fault: Option<String>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    /// A graph whose parameters are all constants (inference, frozen nets).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            trainable: None,
            bound: HashMap::new(),
            trainable_params: Vec::new(),
            fault: None,
        }
    }

    /// A graph that tracks gradients for the trainable entries of `store`.
    pub fn with_trainable(store: &'a ParamStore) -> Self {
        Self {
            trainable: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Real {
        self.value(v).data()[0]
    }

    /// First non-finite op encountered, as an error.
    pub fn check_finite(&self) -> Result<()> {
        match &self.fault {
            Some(op) => Err(Error::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(format!("{} (node {})", op_name(&op), self.nodes.len()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// A leaf that receives a gradient (used for inputs under test).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Binds a parameter. Trainable only when `store` is this graph's
    /// trainable store and the entry is marked trainable.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let key = (store as *const ParamStore as usize, id.0);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let track = self
            .trainable
            .is_some_and(|s| std::ptr::eq(s, store) && store.is_trainable(id));
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Leaf, track);
        if track {
            self.trainable_params.push((id, v));
        }
        self.bound.insert(key, v);
        v
    }

    /// Copy of `v`'s value with no gradient path (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b), rg))
    }

    fn check_row_vec(&self, x: Var, r: Var, name: &'static str) -> Result<()> {
        let (tx, tr) = (self.value(x), self.value(r));
        if tr.len() != tx.cols() {
            return Err(Error::shape(name, format!("{:?} with row vector {:?}", tx.shape(), tr.shape())));
        }
        Ok(())
    }

    /// `x + b` with `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_row_vec(x, b, "add_row")?;
        let mut out = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for i in 0..out.rows() {
            for (o, &bb) in out.row_mut(i).iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::AddRow(x, b), rg))
    }

    /// `x ⊙ s` with `s` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_row_vec(x, s, "mul_row")?;
        let mut out = self.value(x).clone();
        let sv = self.value(s).data().to_vec();
        for i in 0..out.rows() {
            for (o, &ss) in out.row_mut(i).iter_mut().zip(&sv) {
                *o *= ss;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Cow::Owned(out), Op::MulRow(x, s), rg))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Scale(x, c), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Silu(x), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            kernels::softmax_in_place(out.row_mut(i));
        }
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Softmax(x), rg)
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Real) -> Result<Var> {
        self.check_row_vec(x, gamma, "layer_norm")?;
        self.check_row_vec(x, beta, "layer_norm")?;
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let (xhat, rstd) = kernels::normalize_rows(tx.data(), r, c, eps);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as Real;
        let rg = self.rg(x);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = (t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len().max(1) as f64) as Real;
        let rg = self.rg(x);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Mean(x), rg)
    }

    /// Mean absolute value (L1 reduction).
    pub fn mean_abs(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = (t.data().iter().map(|v| v.abs() as f64).sum::<f64>() / t.len().max(1) as f64) as Real;
        let rg = self.rg(x);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::MeanAbs(x), rg)
    }

    /// Sum of squares (squared L2 reduction).
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64 * v as f64).sum::<f64>() as Real;
        let rg = self.rg(x);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::SumSq(x), rg)
    }

    /// `ln(x + eps)`.
    pub fn log_eps(&mut self, x: Var, eps: Real) -> Var {
        let out = self.value(x).map(|v| (v + eps).ln());
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::LogEps(x, eps), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::Reshape(x), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {}", t.rows())));
        }
        let out = t.slice_rows(start, len);
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput)?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols || t.rank() != 2 {
                return Err(Error::shape("concat_rows", format!("{:?}", t.shape())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Cow::Owned(out), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Gathers rows of `table` (`[V, M]`) at `indices`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, m) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            if i >= v {
                return Err(Error::IndexOutOfRange { index: i as u32, vocab: v });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(indices.len(), m, data)?;
        let rg = self.rg(table);
        Ok(self.push(
            Cow::Owned(out),
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Straight-through estimator: the forward value is `quantized`, the
    /// backward pass hands the incoming gradient to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, quantized: Tensor) -> Result<Var> {
        if self.value(x).shape() != quantized.shape() {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", self.value(x).shape(), quantized.shape()),
            ));
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(quantized), Op::StraightThrough(x), rg))
    }

    /// Replaces rows where `mask` is true by `token`.
    pub fn mask_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var> {
        self.check_row_vec(x, token, "mask_rows")?;
        let mut out = self.value(x).clone();
        if mask.len() != out.rows() {
            return Err(Error::shape("mask_rows", format!("{} flags for {} rows", mask.len(), out.rows())));
        }
        let tok = self.value(token).data().to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(i).copy_from_slice(&tok);
            }
        }
        let rg = self.rg(x) || self.rg(token);
        Ok(self.push(
            Cow::Owned(out),
            Op::MaskRows {
                x,
                token,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Rotary position embedding on each head of `x` (`[F, C]`), rotating
    /// consecutive channel pairs by angles of absolute position `pos0 + row`.
    pub fn rope(&mut self, x: Var, heads: usize, pos0: usize, base: Real) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if heads == 0 || c % heads != 0 || (c / heads) % 2 != 0 {
            return Err(Error::shape("rope", format!("{c} channels over {heads} heads")));
        }
        let mut out = t.clone();
        kernels::rotate(out.data_mut(), c, heads, pos0, base, false);
        let rg = self.rg(x);
        Ok(self.push(
            Cow::Owned(out),
            Op::Rope {
                x,
                heads,
                pos0,
                base,
            },
            rg,
        ))
    }

    /// Multi-head windowed causal attention (see [`AttnLayout`]).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        if layout.window == 0 {
            return Err(Error::InvalidArgument("attention window must be >= 1".into()));
        }
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let c = tq.cols();
        if tk.cols() != c || tv.cols() != c || tk.rows() != tv.rows() || c % layout.heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("q {:?} k {:?} v {:?}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        let (out, spans, probs) =
            kernels::attention_forward(tq.data(), tk.data(), tv.data(), tq.rows(), tk.rows(), c, layout)?;
        let out = Tensor::matrix(tq.rows(), c, out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Cow::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                layout,
                spans,
                probs,
            },
            rg,
        ))
    }

    /// Magnitude STFT of a 1-D signal with a periodic Hann window, no centering.
    /// Signals shorter than `fft` are zero-padded to one frame.
    pub fn stft_magnitude(&mut self, x: Var, fft: usize, hop: usize) -> Result<Var> {
        if !fft.is_power_of_two() || hop == 0 {
            return Err(Error::InvalidArgument(format!("fft {fft} / hop {hop}")));
        }
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::EmptyInput);
        }
        let (mags, spectra, frames) = kernels::stft_forward(t.data(), fft, hop);
        let out = Tensor::matrix(frames, fft / 2 + 1, mags)?;
        let rg = self.rg(x);
        Ok(self.push(
            Cow::Owned(out),
            Op::StftMagnitude {
                x,
                fft,
                hop,
                spectra,
            },
            rg,
        ))
    }

    /// Mean over rows of `1 - cos(a_t, b_t)`, denominators floored at `eps`.
    pub fn cosine_distance(&mut self, a: Var, b: Var, eps: Real) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("cosine_distance", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let rows = ta.rows();
        let mut total = 0.0f64;
        for i in 0..rows {
            let (cos, _, _, _) = kernels::cosine(ta.row(i), tb.row(i), eps);
            total += 1.0 - cos as f64;
        }
        let out = Tensor::scalar((total / rows.max(1) as f64) as Real);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::CosineDistance { a, b, eps }, rg))
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if rt.len() != 1 {
            return Err(Error::NonScalarRoot(rt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rt.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            params: self.trainable_params.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    /// Accumulates through a closure that writes into a zeroed buffer shaped like `v`.
    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [Real])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("just set").data_mut());
    }

    fn backward_node(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                self.acc_with(grads, *a, |out| tensor::gemm_bt(gd, tb.data(), out, m, n, k));
                self.acc_with(grads, *b, |out| tensor::gemm_at(ta.data(), gd, out, m, k, n));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, |out| {
                    for ((o, &gg), &bv) in out.iter_mut().zip(gd).zip(tb.data()) {
                        *o += gg * bv;
                    }
                });
                self.acc_with(grads, *b, |out| {
                    for ((o, &gg), &av) in out.iter_mut().zip(gd).zip(ta.data()) {
                        *o += gg * av;
                    }
                });
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g.clone());
                let c = g.cols();
                self.acc_with(grads, *b, |out| {
                    for i in 0..g.rows() {
                        for (o, &gg) in out.iter_mut().zip(&gd[i * c..(i + 1) * c]) {
                            *o += gg;
                        }
                    }
                });
            }
            Op::MulRow(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let c = g.cols();
                self.acc_with(grads, *x, |out| {
                    for i in 0..g.rows() {
                        for j in 0..c {
                            out[i * c + j] += gd[i * c + j] * ts.data()[j];
                        }
                    }
                });
                self.acc_with(grads, *s, |out| {
                    for i in 0..g.rows() {
                        for j in 0..c {
                            out[j] += gd[i * c + j] * tx.data()[i * c + j];
                        }
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, g.map(|v| v * c)),
            Op::Silu(x) => {
                let tx = self.value(*x);
                self.acc_with(grads, *x, |out| {
                    for ((o, &gg), &xv) in out.iter_mut().zip(gd).zip(tx.data()) {
                        let s = sigmoid(xv);
                        *o += gg * s * (1.0 + xv * (1.0 - s));
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                self.acc_with(grads, *x, |out| {
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = &gd[i * c..(i + 1) * c];
                        let dotp: Real = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out[i * c + j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = g.cols();
                let r = g.rows();
                let gv = self.value(*gamma).data();
                self.acc_with(grads, *gamma, |out| {
                    for i in 0..r {
                        for j in 0..c {
                            out[j] += gd[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                self.acc_with(grads, *beta, |out| {
                    for i in 0..r {
                        for j in 0..c {
                            out[j] += gd[i * c + j];
                        }
                    }
                });
                self.acc_with(grads, *x, |out| {
                    kernels::layer_norm_backward(gd, gv, xhat, rstd, r, c, out)
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.acc_with(grads, *x, |out| out.iter_mut().for_each(|o| *o += g0));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as Real;
                let g0 = gd[0] / n;
                self.acc_with(grads, *x, |out| out.iter_mut().for_each(|o| *o += g0));
            }
            Op::MeanAbs(x) => {
                let tx = self.value(*x);
                let g0 = gd[0] / tx.len().max(1) as Real;
                self.acc_with(grads, *x, |out| {
                    for (o, &xv) in out.iter_mut().zip(tx.data()) {
                        if xv > 0.0 {
                            *o += g0;
                        } else if xv < 0.0 {
                            *o -= g0;
                        }
                    }
                });
            }
            Op::SumSq(x) => {
                let tx = self.value(*x);
                let g0 = gd[0];
                self.acc_with(grads, *x, |out| {
                    for (o, &xv) in out.iter_mut().zip(tx.data()) {
                        *o += 2.0 * xv * g0;
                    }
                });
            }
            Op::LogEps(x, eps) => {
                let tx = self.value(*x);
                self.acc_with(grads, *x, |out| {
                    for ((o, &gg), &xv) in out.iter_mut().zip(gd).zip(tx.data()) {
                        *o += gg / (xv + eps);
                    }
                });
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, g.clone().reshape(shape).expect("same length"));
            }
            Op::SliceRows { x, start } => {
                let c = g.cols();
                let off = start * c;
                self.acc_with(grads, *x, |out| {
                    for (o, &gg) in out[off..off + gd.len()].iter_mut().zip(gd) {
                        *o += gg;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let piece = &gd[off..off + n];
                    self.acc_with(grads, p, |out| {
                        for (o, &gg) in out.iter_mut().zip(piece) {
                            *o += gg;
                        }
                    });
                    off += n;
                }
            }
            Op::Embedding { table, indices } => {
                let m = g.cols();
                self.acc_with(grads, *table, |out| {
                    for (i, &row) in indices.iter().enumerate() {
                        for j in 0..m {
                            out[row * m + j] += gd[i * m + j];
                        }
                    }
                });
            }
            Op::StraightThrough(x) => self.acc(grads, *x, g.clone()),
            Op::MaskRows { x, token, mask } => {
                let c = g.cols();
                self.acc_with(grads, *x, |out| {
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            for j in 0..c {
                                out[i * c + j] += gd[i * c + j];
                            }
                        }
                    }
                });
                self.acc_with(grads, *token, |out| {
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for j in 0..c {
                                out[j] += gd[i * c + j];
                            }
                        }
                    }
                });
            }
            Op::Rope {
                x,
                heads,
                pos0,
                base,
            } => {
                let mut back = g.clone();
                kernels::rotate(back.data_mut(), g.cols(), *heads, *pos0, *base, true);
                self.acc(grads, *x, back);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                spans,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut gq = vec![0.0; tq.len()];
                let mut gk = vec![0.0; tk.len()];
                let mut gv = vec![0.0; tv.len()];
                kernels::attention_backward(
                    gd,
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    tq.cols(),
                    layout.heads,
                    spans,
                    probs,
                    &mut gq,
                    &mut gk,
                    &mut gv,
                );
                let wrap = |t: &Tensor, d: Vec<Real>| Tensor::new(t.shape().to_vec(), d).expect("shape");
                self.acc(grads, *q, wrap(tq, gq));
                self.acc(grads, *k, wrap(tk, gk));
                self.acc(grads, *v, wrap(tv, gv));
            }
            Op::StftMagnitude {
                x,
                fft,
                hop,
                spectra,
            } => {
                let mags = node.value.data();
                self.acc_with(grads, *x, |out| {
                    kernels::stft_backward(gd, mags, spectra, *fft, *hop, out)
                });
            }
            Op::CosineDistance { a, b, eps } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (rows, c) = (ta.rows(), ta.cols());
                let scale = -gd[0] / rows.max(1) as Real;
                let mut ga = vec![0.0; ta.len()];
                let mut gb = vec![0.0; tb.len()];
                for i in 0..rows {
                    let (ar, br) = (ta.row(i), tb.row(i));
                    let (cos, na, nb, floored) = kernels::cosine(ar, br, *eps);
                    let denom = if floored { *eps } else { na * nb };
                    for j in 0..c {
                        let (mut da, mut db) = (br[j] / denom, ar[j] / denom);
                        if !floored {
                            da -= cos * ar[j] / (na * na);
                            db -= cos * br[j] / (nb * nb);
                        }
                        ga[i * c + j] = scale * da;
                        gb[i * c + j] = scale * db;
                    }
                }
                self.acc(grads, *a, Tensor::new(ta.shape().to_vec(), ga).expect("shape"));
                self.acc(grads, *b, Tensor::new(tb.shape().to_vec(), gb).expect("shape"));
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a leaf, if it received one.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Gradients of every trainable parameter bound in the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.get(*v).map(|g| (*p, g)))
    }
}

fn sigmoid(x: Real) -> Real {
    1.0 / (1.0 + (-x).exp())
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Scale(..) => "scale",
        Op::Silu(..) => "silu",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::MeanAbs(..) => "mean_abs",
        Op::SumSq(..) => "sum_sq",
        Op::LogEps(..) => "log_eps",
        Op::Reshape(..) => "reshape",
        Op::SliceRows { .. } => "slice_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::Embedding { .. } => "embedding",
        Op::StraightThrough(..) => "straight_through",
        Op::MaskRows { .. } => "mask_rows",
        Op::Rope { .. } => "rope",
        Op::Attention { .. } => "attention",
        Op::StftMagnitude { .. } => "stft_magnitude",
        Op::CosineDistance { .. } => "cosine_distance",
    }
}

#[cfg(test)]
mod tests;
