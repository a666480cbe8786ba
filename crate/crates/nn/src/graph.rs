//! Tape-based reverse-mode differentiation.
//!
//! Every builder method evaluates its operation eagerly and records it on
//! the tape. Nodes are stored in creation order, which is a topological
//! order, so [`Graph::backward`] is a single reverse sweep.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, NnError, Result};
use crate::kernels::{self, AttnShape, ConvShape, PoolShape};
use crate::param::{Gradients, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Option<Var>, shape: ConvShape },
    MaxPool { x: Var, arg: Vec<usize> },
    Linear { x: Var, w: Var, b: Option<Var>, m: usize, d_in: usize, d_out: usize },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    Scale { x: Var, scale: Vec<T> },
    LayerNorm { x: Var, gain: Var, shift: Var, stats: Vec<(T, T)> },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<T> },
    MaskedSoftmax { x: Var, len: usize },
    WeightedSum { w: Var, y: Var, len: usize, dim: usize },
    MaskedMean { y: Var, mask: Vec<bool>, len: usize, dim: usize },
    MaskedMax { y: Var, arg: Vec<usize> },
    Reshape(Var),
    SliceLast { x: Var, start: usize, in_dim: usize },
    ConcatLast { a: Var, b: Var, da: usize, db: usize },
    SelectTime { x: Var, t: usize, len: usize, dim: usize },
    StackTime { parts: Vec<Var>, dim: usize },
    MaskedUpdate { prev: Var, new: Var, rows: Vec<bool>, dim: usize },
    WeightedSquaredError { x: Var, target: Vec<T>, weight: Vec<T> },
    Sum(Var),
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active.
    Train,
    /// Deterministic forward pass.
    Eval,
}

pub struct Graph<'a, T: Real> {
    params: &'a ParamStore<T>,
    nodes: Vec<Node<'a, T>>,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

/// Gradients of every node reached by a backward sweep.
pub struct NodeGrads<T> {
    grads: Vec<Option<Vec<T>>>,
    dims: Vec<Vec<usize>>,
}

impl<T: Real> NodeGrads<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.dims[v.0].clone(), g.clone()).ok()
    }
}

fn ensure_finite<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(NnError::NonFinite(op))
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(params: &'a ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
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

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        ensure_finite(&value, name)?;
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param(id) => self.params.by_id(*id).trainable,
            op => inputs_of(op).iter().any(|&v| self.needs(v)),
        };
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Input, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked; retrieve it with [`Graph::backward_all`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Input, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        if let Some(v) = self.param_vars[id] {
            return Ok(v);
        }
        let p = self.params.by_id(id);
        self.nodes.push(Node { value: Cow::Borrowed(&p.tensor), op: Op::Param(id), requires_grad: p.trainable });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad_h: usize, pad_w: usize) -> Result<Var> {
        let shape = ConvShape::infer(self.dims(x), self.dims(w), pad_h, pad_w)?;
        if let Some(b) = b {
            if self.value(b).len() != shape.c_out {
                return shape_err("conv2d", "bias length differs from output channels");
            }
        }
        let y = kernels::conv2d_forward(&shape, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let dims = if self.dims(x).len() == 3 {
            vec![shape.c_out, shape.out_h(), shape.out_w()]
        } else {
            vec![shape.n, shape.c_out, shape.out_h(), shape.out_w()]
        };
        self.push(Tensor::new(dims, y)?, Op::Conv2d { x, w, b, shape }, "conv2d")
    }

    pub fn maxpool2d(&mut self, x: Var, kh: usize, kw: usize, sh: usize, sw: usize) -> Result<Var> {
        let s = PoolShape::infer(self.dims(x), kh, kw, sh, sw)?;
        let (y, arg) = kernels::maxpool_forward(&s, self.value(x).data());
        let mut dims = self.dims(x).to_vec();
        let r = dims.len();
        dims[r - 2] = s.out_h();
        dims[r - 1] = s.out_w();
        self.push(Tensor::new(dims, y)?, Op::MaxPool { x, arg }, "maxpool2d")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [d_out, d_in] = *self.dims(w) else {
            return shape_err("linear", format!("weight must be 2-D, got {:?}", self.dims(w)));
        };
        let xv = self.value(x);
        if xv.dims().is_empty() || xv.last_dim() != d_in {
            return shape_err("linear", format!("input {:?} vs weight [{d_out}, {d_in}]", xv.dims()));
        }
        if let Some(b) = b {
            if self.value(b).len() != d_out {
                return shape_err("linear", "bias length differs from output width");
            }
        }
        let m = xv.len() / d_in;
        let y = kernels::linear_forward(xv.data(), m, d_in, self.value(w).data(), d_out, b.map(|b| self.value(b).data()));
        let mut dims = xv.dims().to_vec();
        *dims.last_mut().unwrap() = d_out;
        self.push(Tensor::new(dims, y)?, Op::Linear { x, w, b, m, d_in, d_out }, "linear")
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>, name: &'static str) -> Result<Var> {
        let xv = self.value(x);
        let y = Tensor::new(xv.dims().to_vec(), xv.data().iter().map(|&v| f(v)).collect())?;
        self.push(y, op, name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x), "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| v.tanh(), Op::Tanh(x), "tanh")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        let y = Tensor::new(self.dims(a).to_vec(), y)?;
        self.push(y, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).collect();
        let y = Tensor::new(self.dims(a).to_vec(), y)?;
        self.push(y, Op::Mul(a, b), "mul")
    }

    /// Adds a constant whose length divides `x`'s length, repeating it over
    /// the leading entries (e.g. a `[L,d]` table added to `[B,L,d]`).
    pub fn add_const(&mut self, x: Var, c: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if c.is_empty() || !xv.len().is_multiple_of(c.len()) {
            return shape_err("add_const", format!("constant of {} for input {:?}", c.len(), xv.dims()));
        }
        let y = xv.data().iter().zip(c.iter().cycle()).map(|(&a, &b)| a + b).collect();
        let y = Tensor::new(xv.dims().to_vec(), y)?;
        self.push(y, Op::AddConst(x), "add_const")
    }

    /// Elementwise `x * scale + shift` with constant coefficients.
    pub fn affine_const(&mut self, x: Var, scale: Vec<T>, shift: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if scale.len() != xv.len() || shift.len() != xv.len() {
            return shape_err("affine_const", "coefficients must match input length");
        }
        let y = xv.data().iter().zip(&scale).zip(shift).map(|((&v, &a), &b)| v * a + b).collect();
        let y = Tensor::new(xv.dims().to_vec(), y)?;
        self.push(y, Op::Scale { x, scale }, "affine_const")
    }

    /// Inverted dropout; identity in [`Mode::Eval`] or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.mode == Mode::Eval || p <= 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let scale: Vec<T> = (0..n).map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let shift = vec![T::zero(); n];
        self.affine_const(x, scale, &shift)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gain).len() != d || self.value(shift).len() != d {
            return shape_err("layer_norm", format!("gain/shift must have {d} entries"));
        }
        let (y, stats) = kernels::layer_norm_forward(self.value(x).data(), d, self.value(gain).data(), self.value(shift).data());
        let y = Tensor::new(self.dims(x).to_vec(), y)?;
        self.push(y, Op::LayerNorm { x, gain, shift, stats }, "layer_norm")
    }

    /// Scaled dot-product attention over `[B,L,d]` (or `[L,d]`) with a key
    /// mask of `B·L` entries.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: &[bool]) -> Result<Var> {
        let shape = AttnShape::infer(self.dims(q), self.dims(k), self.dims(v), key_mask.len())?;
        let (out, probs) =
            kernels::attention_forward(&shape, self.value(q).data(), self.value(k).data(), self.value(v).data(), key_mask)?;
        let y = Tensor::new(self.dims(q).to_vec(), out)?;
        self.push(y, Op::Attention { q, k, v, shape, probs }, "attention")
    }

    /// Softmax over the last axis; `mask` has one entry per element.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return shape_err("masked_softmax", format!("mask of {} for input {:?}", mask.len(), xv.dims()));
        }
        let len = xv.last_dim();
        let y = kernels::masked_softmax_forward(xv.data(), mask, len)?;
        let y = Tensor::new(xv.dims().to_vec(), y)?;
        self.push(y, Op::MaskedSoftmax { x, len }, "masked_softmax")
    }

    fn seq_dims(&self, y: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.dims(y) {
            [b, l, d] => Ok((b, l, d)),
            ref other => shape_err(op, format!("expected [B,L,d], got {other:?}")),
        }
    }

    /// `z[b] = Σ_l w[b,l] · y[b,l,:]` for weights `[B,L]` and sequence `[B,L,d]`.
    pub fn weighted_sum(&mut self, w: Var, y: Var) -> Result<Var> {
        let (b, l, d) = self.seq_dims(y, "weighted_sum")?;
        if self.dims(w) != [b, l] {
            return shape_err("weighted_sum", format!("weights {:?} for sequence [{b},{l},{d}]", self.dims(w)));
        }
        let (wv, yv) = (self.value(w).data(), self.value(y).data());
        let mut z = vec![T::zero(); b * d];
        for bi in 0..b {
            let zr = &mut z[bi * d..][..d];
            for li in 0..l {
                let a = wv[bi * l + li];
                for (o, &v) in zr.iter_mut().zip(&yv[(bi * l + li) * d..][..d]) {
                    *o += a * v;
                }
            }
        }
        self.push(Tensor::new([b, d], z)?, Op::WeightedSum { w, y, len: l, dim: d }, "weighted_sum")
    }

    fn check_seq_mask(&self, y: Var, mask: &[bool], op: &'static str) -> Result<(usize, usize, usize)> {
        let (b, l, d) = self.seq_dims(y, op)?;
        if mask.len() != b * l {
            return shape_err(op, format!("mask of {} for [{b},{l},{d}]", mask.len()));
        }
        if mask.chunks_exact(l.max(1)).any(|row| !row.iter().any(|&m| m)) {
            return Err(NnError::AllMasked { op });
        }
        Ok((b, l, d))
    }

    /// Mean over the valid time steps of `[B,L,d]`.
    pub fn masked_mean(&mut self, y: Var, mask: &[bool]) -> Result<Var> {
        let (b, l, d) = self.check_seq_mask(y, mask, "masked_mean")?;
        let yv = self.value(y).data();
        let mut z = vec![T::zero(); b * d];
        for bi in 0..b {
            let count = mask[bi * l..][..l].iter().filter(|&&m| m).count();
            let inv = T::one() / T::of(count as f64);
            let zr = &mut z[bi * d..][..d];
            for li in (0..l).filter(|&li| mask[bi * l + li]) {
                for (o, &v) in zr.iter_mut().zip(&yv[(bi * l + li) * d..][..d]) {
                    *o += v;
                }
            }
            for o in zr.iter_mut() {
                *o *= inv;
            }
        }
        self.push(Tensor::new([b, d], z)?, Op::MaskedMean { y, mask: mask.to_vec(), len: l, dim: d }, "masked_mean")
    }

    /// Elementwise maximum over the valid time steps of `[B,L,d]`.
    pub fn masked_max(&mut self, y: Var, mask: &[bool]) -> Result<Var> {
        let (b, l, d) = self.check_seq_mask(y, mask, "masked_max")?;
        let yv = self.value(y).data();
        let mut z = vec![T::zero(); b * d];
        let mut arg = vec![0usize; b * d];
        for bi in 0..b {
            for di in 0..d {
                let mut best: Option<usize> = None;
                for li in (0..l).filter(|&li| mask[bi * l + li]) {
                    let idx = (bi * l + li) * d + di;
                    if best.is_none_or(|bst| yv[idx] > yv[bst]) {
                        best = Some(idx);
                    }
                }
                let idx = best.expect("row has a valid step");
                z[bi * d + di] = yv[idx];
                arg[bi * d + di] = idx;
            }
        }
        self.push(Tensor::new([b, d], z)?, Op::MaskedMax { y, arg }, "masked_max")
    }

    pub fn reshape(&mut self, x: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let y = self.value(x).clone().reshape(dims)?;
        self.push(y, Op::Reshape(x), "reshape")
    }

    pub fn slice_last(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let in_dim = xv.last_dim();
        if start + width > in_dim || xv.dims().is_empty() {
            return shape_err("slice_last", format!("[{start}, {}) out of last axis {in_dim}", start + width));
        }
        let y: Vec<T> = xv.data().chunks_exact(in_dim).flat_map(|r| r[start..start + width].iter().copied()).collect();
        let mut dims = xv.dims().to_vec();
        *dims.last_mut().unwrap() = width;
        self.push(Tensor::new(dims, y)?, Op::SliceLast { x, start, in_dim }, "slice_last")
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (da, db) = (av.last_dim(), bv.last_dim());
        let (ad, bd) = (av.dims(), bv.dims());
        if ad.is_empty() || ad.len() != bd.len() || ad[..ad.len() - 1] != bd[..bd.len() - 1] {
            return shape_err("concat_last", format!("{ad:?} vs {bd:?}"));
        }
        let mut y = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks_exact(da).zip(bv.data().chunks_exact(db)) {
            y.extend_from_slice(ra);
            y.extend_from_slice(rb);
        }
        let mut dims = ad.to_vec();
        *dims.last_mut().unwrap() = da + db;
        self.push(Tensor::new(dims, y)?, Op::ConcatLast { a, b, da, db }, "concat_last")
    }

    /// `[B,L,d]` → `[B,d]` at time step `t`.
    pub fn select_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let (b, l, d) = self.seq_dims(x, "select_time")?;
        if t >= l {
            return shape_err("select_time", format!("step {t} of {l}"));
        }
        let xv = self.value(x).data();
        let y: Vec<T> = (0..b).flat_map(|bi| xv[(bi * l + t) * d..][..d].iter().copied()).collect();
        self.push(Tensor::new([b, d], y)?, Op::SelectTime { x, t, len: l, dim: d }, "select_time")
    }

    /// Stacks `L` tensors of shape `[B,d]` into `[B,L,d]`.
    pub fn stack_time(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("stack_time", "no inputs");
        };
        let [b, d] = *self.dims(first) else {
            return shape_err("stack_time", format!("parts must be [B,d], got {:?}", self.dims(first)));
        };
        if parts.iter().any(|&p| self.dims(p) != [b, d]) {
            return shape_err("stack_time", "parts differ in shape");
        }
        let l = parts.len();
        let mut y = vec![T::zero(); b * l * d];
        for (t, &p) in parts.iter().enumerate() {
            let pv = self.value(p).data();
            for bi in 0..b {
                y[(bi * l + t) * d..][..d].copy_from_slice(&pv[bi * d..][..d]);
            }
        }
        self.push(Tensor::new([b, l, d], y)?, Op::StackTime { parts: parts.to_vec(), dim: d }, "stack_time")
    }

    /// Row-wise select: rows with `rows[i] == true` take `new`, others keep `prev`.
    pub fn masked_update(&mut self, prev: Var, new: Var, rows: &[bool]) -> Result<Var> {
        self.same_shape(prev, new, "masked_update")?;
        let d = self.value(prev).last_dim();
        if rows.len() * d != self.value(prev).len() {
            return shape_err("masked_update", "row mask does not match input rows");
        }
        let (pv, nv) = (self.value(prev).data(), self.value(new).data());
        let mut y = Vec::with_capacity(pv.len());
        for (i, &keep_new) in rows.iter().enumerate() {
            y.extend_from_slice(if keep_new { &nv[i * d..][..d] } else { &pv[i * d..][..d] });
        }
        let y = Tensor::new(self.dims(prev).to_vec(), y)?;
        self.push(y, Op::MaskedUpdate { prev, new, rows: rows.to_vec(), dim: d }, "masked_update")
    }

    /// Scalar `Σ weight_i · (x_i − target_i)²`.
    pub fn weighted_squared_error(&mut self, x: Var, target: Vec<T>, weight: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if target.len() != xv.len() || weight.len() != xv.len() {
            return shape_err("weighted_squared_error", "target/weight must match input length");
        }
        let loss: T = xv.data().iter().zip(&target).zip(&weight).map(|((&p, &t), &w)| w * (p - t) * (p - t)).sum();
        self.push(Tensor::scalar(loss), Op::WeightedSquaredError { x, target, weight }, "weighted_squared_error")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Reverse sweep from a scalar loss; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        Ok(self.backward_all(loss)?.0)
    }

    /// Like [`Graph::backward`], additionally exposing every node gradient
    /// (including inputs created with [`Graph::input_with_grad`]).
    pub fn backward_all(&self, loss: Var) -> Result<(Gradients<T>, NodeGrads<T>)> {
        let node = self.nodes.get(loss.0).ok_or(NnError::NoGraph)?;
        if matches!(node.op, Op::Input | Op::Param(_)) {
            return Err(NnError::NoGraph);
        }
        if node.value.len() != 1 {
            return Err(NnError::NonScalarLoss(node.value.dims().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        let mut out = vec![None; self.params.len()];
        for (id, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = &grads[v.0] {
                    out[id] = Some(Tensor::new(self.dims(*v).to_vec(), g.clone())?);
                }
            }
        }
        let dims = self.nodes.iter().map(|n| n.value.dims().to_vec()).collect();
        Ok((Gradients { grads: out }, NodeGrads { grads, dims }))
    }

    /// Removes the gradient buffer of `v` (zero-filled if absent), or `None`
    /// when `v` does not need a gradient.
    fn take(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
        if !self.needs(v) {
            return None;
        }
        Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); self.value(v).len()]))
    }

    fn put(grads: &mut [Option<Vec<T>>], v: Var, buf: Option<Vec<T>>) {
        let Some(buf) = buf else { return };
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, b) in existing.iter_mut().zip(buf) {
                    *e += b;
                }
            }
            slot => *slot = Some(buf),
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let y = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, shape } => {
                let mut dx = self.take(grads, *x);
                let mut dw = self.take(grads, *w);
                let mut db = b.and_then(|b| self.take(grads, b));
                kernels::conv2d_backward(
                    shape,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                Self::put(grads, *x, dx);
                Self::put(grads, *w, dw);
                if let Some(b) = b {
                    Self::put(grads, *b, db);
                }
            }
            Op::MaxPool { x, arg } => {
                if let Some(mut dx) = self.take(grads, *x) {
                    for (&a, &gv) in arg.iter().zip(g) {
                        dx[a] += gv;
                    }
                    Self::put(grads, *x, Some(dx));
                }
            }
            Op::Linear { x, w, b, m, d_in, d_out } => {
                let mut dx = self.take(grads, *x);
                let mut dw = self.take(grads, *w);
                let mut db = b.and_then(|b| self.take(grads, b));
                kernels::linear_backward(
                    self.value(*x).data(),
                    *m,
                    *d_in,
                    self.value(*w).data(),
                    *d_out,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                Self::put(grads, *x, dx);
                Self::put(grads, *w, dw);
                if let Some(b) = b {
                    Self::put(grads, *b, db);
                }
            }
            Op::Relu(x) => self.unary(grads, *x, g, |k| if y[k] > T::zero() { T::one() } else { T::zero() }),
            Op::Sigmoid(x) => self.unary(grads, *x, g, |k| y[k] * (T::one() - y[k])),
            Op::Tanh(x) => self.unary(grads, *x, g, |k| T::one() - y[k] * y[k]),
            Op::AddConst(x) | Op::Reshape(x) => self.unary(grads, *x, g, |_| T::one()),
            Op::Scale { x, scale } => self.unary(grads, *x, g, |k| scale[k]),
            Op::Add(a, b) => {
                self.unary(grads, *a, g, |_| T::one());
                self.unary(grads, *b, g, |_| T::one());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.unary(grads, *a, g, |k| bv[k]);
                self.unary(grads, *b, g, |k| av[k]);
            }
            Op::LayerNorm { x, gain, shift, stats } => {
                let d = self.value(*x).last_dim();
                let mut dx = self.take(grads, *x);
                let mut dg = self.take(grads, *gain);
                let mut ds = self.take(grads, *shift);
                kernels::layer_norm_backward(
                    self.value(*x).data(),
                    d,
                    self.value(*gain).data(),
                    stats,
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    ds.as_deref_mut(),
                );
                Self::put(grads, *x, dx);
                Self::put(grads, *gain, dg);
                Self::put(grads, *shift, ds);
            }
            Op::Attention { q, k, v, shape, probs } => {
                let mut dq = self.take(grads, *q);
                let mut dk = self.take(grads, *k);
                let mut dv = self.take(grads, *v);
                kernels::attention_backward(
                    shape,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                Self::put(grads, *q, dq);
                Self::put(grads, *k, dk);
                Self::put(grads, *v, dv);
            }
            Op::MaskedSoftmax { x, len } => {
                if let Some(mut dx) = self.take(grads, *x) {
                    kernels::softmax_backward(y, g, *len, &mut dx);
                    Self::put(grads, *x, Some(dx));
                }
            }
            Op::WeightedSum { w, y: seq, len, dim } => {
                let (l, d) = (*len, *dim);
                let (wv, yv) = (self.value(*w).data(), self.value(*seq).data());
                let b = wv.len() / l;
                if let Some(mut dw) = self.take(grads, *w) {
                    for bi in 0..b {
                        let gz = &g[bi * d..][..d];
                        for li in 0..l {
                            let row = &yv[(bi * l + li) * d..][..d];
                            dw[bi * l + li] += row.iter().zip(gz).map(|(&a, &c)| a * c).sum::<T>();
                        }
                    }
                    Self::put(grads, *w, Some(dw));
                }
                if let Some(mut dy) = self.take(grads, *seq) {
                    for bi in 0..b {
                        let gz = &g[bi * d..][..d];
                        for li in 0..l {
                            let a = wv[bi * l + li];
                            for (o, &c) in dy[(bi * l + li) * d..][..d].iter_mut().zip(gz) {
                                *o += a * c;
                            }
                        }
                    }
                    Self::put(grads, *seq, Some(dy));
                }
            }
            Op::MaskedMean { y: seq, mask, len, dim } => {
                if let Some(mut dy) = self.take(grads, *seq) {
                    let (l, d) = (*len, *dim);
                    for (bi, row) in mask.chunks_exact(l).enumerate() {
                        let inv = T::one() / T::of(row.iter().filter(|&&m| m).count() as f64);
                        for li in (0..l).filter(|&li| row[li]) {
                            for (o, &c) in dy[(bi * l + li) * d..][..d].iter_mut().zip(&g[bi * d..][..d]) {
                                *o += c * inv;
                            }
                        }
                    }
                    Self::put(grads, *seq, Some(dy));
                }
            }
            Op::MaskedMax { y: seq, arg } => {
                if let Some(mut dy) = self.take(grads, *seq) {
                    for (&a, &gv) in arg.iter().zip(g) {
                        dy[a] += gv;
                    }
                    Self::put(grads, *seq, Some(dy));
                }
            }
            Op::SliceLast { x, start, in_dim } => {
                if let Some(mut dx) = self.take(grads, *x) {
                    let width = g.len() / (dx.len() / in_dim);
                    for (dr, gr) in dx.chunks_exact_mut(*in_dim).zip(g.chunks_exact(width)) {
                        for (o, &c) in dr[*start..*start + width].iter_mut().zip(gr) {
                            *o += c;
                        }
                    }
                    Self::put(grads, *x, Some(dx));
                }
            }
            Op::ConcatLast { a, b, da, db } => {
                let rows = g.len() / (da + db);
                if let Some(mut ga) = self.take(grads, *a) {
                    for r in 0..rows {
                        for (o, &c) in ga[r * da..][..*da].iter_mut().zip(&g[r * (da + db)..][..*da]) {
                            *o += c;
                        }
                    }
                    Self::put(grads, *a, Some(ga));
                }
                if let Some(mut gb) = self.take(grads, *b) {
                    for r in 0..rows {
                        for (o, &c) in gb[r * db..][..*db].iter_mut().zip(&g[r * (da + db) + da..][..*db]) {
                            *o += c;
                        }
                    }
                    Self::put(grads, *b, Some(gb));
                }
            }
            Op::SelectTime { x, t, len, dim } => {
                if let Some(mut dx) = self.take(grads, *x) {
                    let (l, d) = (*len, *dim);
                    for (bi, gr) in g.chunks_exact(d).enumerate() {
                        for (o, &c) in dx[(bi * l + t) * d..][..d].iter_mut().zip(gr) {
                            *o += c;
                        }
                    }
                    Self::put(grads, *x, Some(dx));
                }
            }
            Op::StackTime { parts, dim } => {
                let (l, d) = (parts.len(), *dim);
                let b = g.len() / (l * d);
                for (t, &p) in parts.iter().enumerate() {
                    if let Some(mut dp) = self.take(grads, p) {
                        for bi in 0..b {
                            for (o, &c) in dp[bi * d..][..d].iter_mut().zip(&g[(bi * l + t) * d..][..d]) {
                                *o += c;
                            }
                        }
                        Self::put(grads, p, Some(dp));
                    }
                }
            }
            Op::MaskedUpdate { prev, new, rows, dim } => {
                let d = *dim;
                self.unary(grads, *prev, g, |k| if rows[k / d] { T::zero() } else { T::one() });
                self.unary(grads, *new, g, |k| if rows[k / d] { T::one() } else { T::zero() });
            }
            Op::WeightedSquaredError { x, target, weight } => {
                let xv = self.value(*x).data();
                let two = T::of(2.0);
                self.unary(grads, *x, g, |k| two * weight[k] * (xv[k] - target[k]));
            }
            Op::Sum(x) => {
                let gv = g[0];
                if let Some(mut dx) = self.take(grads, *x) {
                    for o in dx.iter_mut() {
                        *o += gv;
                    }
                    Self::put(grads, *x, Some(dx));
                }
            }
        }
        Ok(())
    }

    /// Accumulates `g[k] · local(k)` into the gradient of `x`. Scalar `g`
    /// is broadcast.
    fn unary(&self, grads: &mut [Option<Vec<T>>], x: Var, g: &[T], local: impl Fn(usize) -> T) {
        if let Some(mut dx) = self.take(grads, x) {
            if g.len() == 1 && dx.len() != 1 {
                for (k, o) in dx.iter_mut().enumerate() {
                    *o += g[0] * local(k);
                }
            } else {
                for (k, (o, &gv)) in dx.iter_mut().zip(g).enumerate() {
                    *o += gv * local(k);
                }
            }
            Self::put(grads, x, Some(dx));
        }
    }
}

fn inputs_of<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Input | Op::Param(_) => vec![],
        Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::MaxPool { x, .. }
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Tanh(x)
        | Op::AddConst(x)
        | Op::Scale { x, .. }
        | Op::MaskedSoftmax { x, .. }
        | Op::Reshape(x)
        | Op::SliceLast { x, .. }
        | Op::SelectTime { x, .. }
        | Op::WeightedSquaredError { x, .. }
        | Op::Sum(x) => vec![*x],
        Op::MaskedMean { y, .. } | Op::MaskedMax { y, .. } => vec![*y],
        Op::Add(a, b) | Op::Mul(a, b) | Op::ConcatLast { a, b, .. } => vec![*a, *b],
        Op::LayerNorm { x, gain, shift, .. } => vec![*x, *gain, *shift],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::WeightedSum { w, y, .. } => vec![*w, *y],
        Op::StackTime { parts, .. } => parts.clone(),
        Op::MaskedUpdate { prev, new, .. } => vec![*prev, *new],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval, 0);
        let x = g.input_with_grad(Tensor::from_fn([2, 3], |i| i as f64));
        let s = g.sum(x).unwrap();
        let (_, nodes) = g.backward_all(s).unwrap();
        assert_eq!(nodes.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_on_leaf_fails() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut g = Graph::new(&store, Mode::Eval, 0);
        let w = g.param("w").unwrap();
        assert_eq!(g.backward(w).unwrap_err(), NnError::NoGraph);
        let x = g.input(Tensor::zeros([2]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(NnError::NonScalarLoss(_))));
    }

    #[test]
    fn aliased_operands_accumulate() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval, 0);
        let x = g.input_with_grad(Tensor::new([2], vec![3.0, -2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let (_, nodes) = g.backward_all(s).unwrap();
        assert_eq!(nodes.get(x).unwrap().data(), &[6.0, -4.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::new(&store, Mode::Eval, 0);
        let x = g.input(Tensor::full([4], 1.0));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);
    }
}
