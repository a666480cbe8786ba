//! Forward and backward kernels on raw buffers.
//!
//! The public functions in this module are the plain (non-recording) forward
//! passes. The graph in [`crate::graph`] calls the same forward code and the
//! `*_backward` helpers when differentiating.

use crate::error::{shape_err, NnError, Result};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::Tensor;

/// Upper bound on the number of elements in one im2col scratch buffer.
const IM2COL_BUDGET: usize = 1 << 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvShape {
    pub fn infer(input: &[usize], weight: &[usize], pad_h: usize, pad_w: usize) -> Result<Self> {
        let (n, c_in, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return shape_err("conv2d", format!("input must be [C,H,W] or [N,C,H,W], got {input:?}")),
        };
        let [c_out, wc, kh, kw] = *weight else {
            return shape_err("conv2d", format!("weight must be [C_out,C_in,kH,kW], got {weight:?}"));
        };
        if wc != c_in {
            return shape_err("conv2d", format!("input has {c_in} channels, weight expects {wc}"));
        }
        if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
            return shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit padded input {}x{}", h + 2 * pad_h, w + 2 * pad_w),
            );
        }
        Ok(Self { n, c_in, h, w, c_out, kh, kw, pad_h, pad_w })
    }

    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad_h - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad_w - self.kw + 1
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn chunk(&self) -> usize {
        (IM2COL_BUDGET / (self.patch() * self.positions()).max(1)).clamp(1, self.n.max(1))
    }
}

/// Writes `[K, nc·P]` patch columns for samples `n0..n0+nc`.
fn im2col<T: Real>(s: &ConvShape, x: &[T], n0: usize, nc: usize, cols: &mut [T]) {
    let (ho, wo) = (s.out_h(), s.out_w());
    let p = ho * wo;
    let width = nc * p;
    let plane = s.h * s.w;
    for c in 0..s.c_in {
        for i in 0..s.kh {
            for j in 0..s.kw {
                let row = (c * s.kh + i) * s.kw + j;
                let dst_row = &mut cols[row * width..(row + 1) * width];
                for si in 0..nc {
                    let xin = &x[((n0 + si) * s.c_in + c) * plane..][..plane];
                    for oy in 0..ho {
                        let dst = &mut dst_row[si * p + oy * wo..si * p + (oy + 1) * wo];
                        let iy = (oy + i) as isize - s.pad_h as isize;
                        if iy < 0 || iy >= s.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let xrow = &xin[iy as usize * s.w..][..s.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox + j) as isize - s.pad_w as isize;
                            *d = if ix >= 0 && ix < s.w as isize { xrow[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates patch-column gradients back onto the input gradient.
fn col2im<T: Real>(s: &ConvShape, cols: &[T], n0: usize, nc: usize, dx: &mut [T]) {
    let (ho, wo) = (s.out_h(), s.out_w());
    let p = ho * wo;
    let width = nc * p;
    let plane = s.h * s.w;
    for c in 0..s.c_in {
        for i in 0..s.kh {
            for j in 0..s.kw {
                let row = (c * s.kh + i) * s.kw + j;
                let src_row = &cols[row * width..(row + 1) * width];
                for si in 0..nc {
                    let dxin = &mut dx[((n0 + si) * s.c_in + c) * plane..][..plane];
                    for oy in 0..ho {
                        let iy = (oy + i) as isize - s.pad_h as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let src = &src_row[si * p + oy * wo..si * p + (oy + 1) * wo];
                        let drow = &mut dxin[iy as usize * s.w..][..s.w];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox + j) as isize - s.pad_w as isize;
                            if ix >= 0 && ix < s.w as isize {
                                drow[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(s: &ConvShape, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let p = s.positions();
    let k = s.patch();
    let mut y = vec![T::zero(); s.n * s.c_out * p];
    let chunk = s.chunk();
    let mut cols = vec![T::zero(); k * chunk * p];
    let mut out = vec![T::zero(); s.c_out * chunk * p];
    let mut n0 = 0;
    while n0 < s.n {
        let nc = chunk.min(s.n - n0);
        let width = nc * p;
        im2col(s, x, n0, nc, &mut cols[..k * width]);
        gemm(
            MatRef::row_major(w, s.c_out, k),
            MatRef::row_major(&cols[..k * width], k, width),
            T::zero(),
            &mut out[..s.c_out * width],
        );
        for si in 0..nc {
            for o in 0..s.c_out {
                let bias = b.map_or(T::zero(), |b| b[o]);
                let src = &out[o * width + si * p..][..p];
                let dst = &mut y[((n0 + si) * s.c_out + o) * p..][..p];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + bias;
                }
            }
        }
        n0 += nc;
    }
    y
}

/// Accumulates weight/bias gradients and (optionally) the input gradient.
pub(crate) fn conv2d_backward<T: Real>(
    s: &ConvShape,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let p = s.positions();
    let k = s.patch();
    if let Some(db) = db {
        for n in 0..s.n {
            for o in 0..s.c_out {
                let g: T = dy[(n * s.c_out + o) * p..][..p].iter().copied().sum();
                db[o] += g;
            }
        }
    }
    let mut dw = dw;
    if dx.is_none() && dw.is_none() {
        return;
    }
    let chunk = s.chunk();
    let mut cols = vec![T::zero(); k * chunk * p];
    let mut dyc = vec![T::zero(); s.c_out * chunk * p];
    let mut n0 = 0;
    while n0 < s.n {
        let nc = chunk.min(s.n - n0);
        let width = nc * p;
        for si in 0..nc {
            for o in 0..s.c_out {
                dyc[o * width + si * p..][..p].copy_from_slice(&dy[((n0 + si) * s.c_out + o) * p..][..p]);
            }
        }
        let dyv = MatRef::row_major(&dyc[..s.c_out * width], s.c_out, width);
        if let Some(dw) = dw.as_deref_mut() {
            im2col(s, x, n0, nc, &mut cols[..k * width]);
            gemm(dyv, MatRef::transposed(&cols[..k * width], k, width), T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(MatRef::transposed(w, s.c_out, k), dyv, T::zero(), &mut cols[..k * width]);
            col2im(s, &cols[..k * width], n0, nc, dx);
        }
        n0 += nc;
    }
}

/// Stride-1 2-D cross-correlation. `input` is `[C,H,W]` or `[N,C,H,W]`,
/// `weight` is `[C_out,C_in,kH,kW]`; the output keeps the input's rank.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad_h: usize,
    pad_w: usize,
) -> Result<Tensor<T>> {
    let s = ConvShape::infer(input.dims(), weight.dims(), pad_h, pad_w)?;
    if let Some(b) = bias {
        if b.len() != s.c_out {
            return shape_err("conv2d", format!("bias has {} entries, expected {}", b.len(), s.c_out));
        }
    }
    let y = conv2d_forward(&s, input.data(), weight.data(), bias.map(|b| b.data()));
    let dims = if input.dims().len() == 3 {
        vec![s.c_out, s.out_h(), s.out_w()]
    } else {
        vec![s.n, s.c_out, s.out_h(), s.out_w()]
    };
    Tensor::new(dims, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolShape {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
}

impl PoolShape {
    pub fn infer(input: &[usize], kh: usize, kw: usize, sh: usize, sw: usize) -> Result<Self> {
        if input.len() < 2 {
            return shape_err("maxpool2d", format!("input needs at least 2 axes, got {input:?}"));
        }
        let h = input[input.len() - 2];
        let w = input[input.len() - 1];
        if kh > h || kw > w {
            return Err(NnError::KernelTooLarge { op: "maxpool2d", kernel: (kh, kw), input: (h, w) });
        }
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return shape_err("maxpool2d", "kernel and stride must be positive");
        }
        let planes = input[..input.len() - 2].iter().product();
        Ok(Self { planes, h, w, kh, kw, sh, sw })
    }

    pub fn out_h(&self) -> usize {
        (self.h - self.kh) / self.sh + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.kw) / self.sw + 1
    }
}

/// Returns pooled values and, for each output, the flat input index of the
/// first (row-major) maximum.
pub(crate) fn maxpool_forward<T: Real>(s: &PoolShape, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (s.out_h(), s.out_w());
    let mut y = Vec::with_capacity(s.planes * ho * wo);
    let mut arg = Vec::with_capacity(s.planes * ho * wo);
    for pl in 0..s.planes {
        let base = pl * s.h * s.w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * s.sh * s.w + ox * s.sw;
                for i in 0..s.kh {
                    for j in 0..s.kw {
                        let idx = base + (oy * s.sh + i) * s.w + ox * s.sw + j;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

pub fn maxpool2d<T: Real>(input: &Tensor<T>, kh: usize, kw: usize, sh: usize, sw: usize) -> Result<Tensor<T>> {
    let s = PoolShape::infer(input.dims(), kh, kw, sh, sw)?;
    let (y, _) = maxpool_forward(&s, input.data());
    let mut dims = input.dims().to_vec();
    let r = dims.len();
    dims[r - 2] = s.out_h();
    dims[r - 1] = s.out_w();
    Tensor::new(dims, y)
}

pub(crate) fn linear_forward<T: Real>(x: &[T], m: usize, d_in: usize, w: &[T], d_out: usize, b: Option<&[T]>) -> Vec<T> {
    let mut y = vec![T::zero(); m * d_out];
    gemm(MatRef::row_major(x, m, d_in), MatRef::transposed(w, d_out, d_in), T::zero(), &mut y);
    if let Some(b) = b {
        for row in y.chunks_exact_mut(d_out) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Real>(
    x: &[T],
    m: usize,
    d_in: usize,
    w: &[T],
    d_out: usize,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        gemm(MatRef::row_major(dy, m, d_out), MatRef::row_major(w, d_out, d_in), T::one(), dx);
    }
    if let Some(dw) = dw {
        gemm(MatRef::transposed(dy, m, d_out), MatRef::row_major(x, m, d_in), T::one(), dw);
    }
    if let Some(db) = db {
        for row in dy.chunks_exact(d_out) {
            for (g, &v) in db.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
}

/// Affine map over the last axis: `y = x · Wᵀ + b`.
pub fn linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [d_out, d_in] = *weight.dims() else {
        return shape_err("linear", format!("weight must be 2-D, got {:?}", weight.dims()));
    };
    if input.last_dim() != d_in || input.dims().is_empty() {
        return shape_err("linear", format!("input {:?} vs weight {:?}", input.dims(), weight.dims()));
    }
    if let Some(b) = bias {
        if b.len() != d_out {
            return shape_err("linear", format!("bias has {} entries, expected {d_out}", b.len()));
        }
    }
    let m = input.len() / d_in;
    let y = linear_forward(input.data(), m, d_in, weight.data(), d_out, bias.map(|b| b.data()));
    let mut dims = input.dims().to_vec();
    *dims.last_mut().unwrap() = d_out;
    Tensor::new(dims, y)
}

/// Row-wise softmax over `rows × len`, restricted to unmasked entries.
/// Max and sum run over unmasked entries only, so masked entries never
/// influence the result.
pub(crate) fn masked_softmax_forward<T: Real>(x: &[T], mask: &[bool], len: usize) -> Result<Vec<T>> {
    let mut y = vec![T::zero(); x.len()];
    for ((xr, mr), yr) in x.chunks_exact(len).zip(mask.chunks_exact(len)).zip(y.chunks_exact_mut(len)) {
        let mut max = T::neg_infinity();
        for (&v, &m) in xr.iter().zip(mr) {
            if m && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(NnError::AllMasked { op: "masked_softmax" });
        }
        let mut sum = T::zero();
        for ((&v, &m), o) in xr.iter().zip(mr).zip(yr.iter_mut()) {
            if m {
                *o = (v - max).exp();
                sum += *o;
            }
        }
        for (o, &m) in yr.iter_mut().zip(mr) {
            if m {
                *o /= sum;
            }
        }
    }
    Ok(y)
}

pub(crate) fn softmax_backward<T: Real>(p: &[T], dp: &[T], len: usize, dx: &mut [T]) {
    for ((pr, gr), dr) in p.chunks_exact(len).zip(dp.chunks_exact(len)).zip(dx.chunks_exact_mut(len)) {
        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &pv), &gv) in dr.iter_mut().zip(pr).zip(gr) {
            *d += pv * (gv - dot);
        }
    }
}

/// Softmax over the last axis of `scores`; `mask` has one entry per score,
/// or one entry per position of the last axis (broadcast over rows).
pub fn masked_softmax<T: Real>(scores: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    let len = scores.last_dim();
    let full: Vec<bool>;
    let mask = if mask.len() == scores.len() {
        mask
    } else if mask.len() == len {
        full = mask.iter().copied().cycle().take(scores.len()).collect();
        &full
    } else {
        return shape_err("masked_softmax", format!("mask of {} for scores {:?}", mask.len(), scores.dims()));
    };
    let y = masked_softmax_forward(scores.data(), mask, len)?;
    Tensor::new(scores.dims().to_vec(), y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
}

impl AttnShape {
    pub fn infer(q: &[usize], k: &[usize], v: &[usize], mask_len: usize) -> Result<Self> {
        if q != k || q != v {
            return shape_err("attention", format!("q {q:?}, k {k:?}, v {v:?} must match"));
        }
        let s = match *q {
            [len, dim] => Self { batch: 1, len, dim },
            [batch, len, dim] => Self { batch, len, dim },
            _ => return shape_err("attention", format!("expected [L,d] or [B,L,d], got {q:?}")),
        };
        if mask_len != s.batch * s.len {
            return shape_err("attention", format!("mask has {mask_len} entries, expected {}", s.batch * s.len));
        }
        Ok(s)
    }
}

/// Returns the attended values and the `[B,L,L]` attention probabilities.
pub(crate) fn attention_forward<T: Real>(s: &AttnShape, q: &[T], k: &[T], v: &[T], key_mask: &[bool]) -> Result<(Vec<T>, Vec<T>)> {
    let (l, d) = (s.len, s.dim);
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut out = vec![T::zero(); s.batch * l * d];
    let mut probs = vec![T::zero(); s.batch * l * l];
    let mut scores = vec![T::zero(); l * l];
    let mut mask = vec![false; l * l];
    for b in 0..s.batch {
        let qb = &q[b * l * d..][..l * d];
        let kb = &k[b * l * d..][..l * d];
        let vb = &v[b * l * d..][..l * d];
        gemm(MatRef::row_major(qb, l, d), MatRef::transposed(kb, l, d), T::zero(), &mut scores);
        for sc in &mut scores {
            *sc *= scale;
        }
        let km = &key_mask[b * l..][..l];
        for row in mask.chunks_exact_mut(l) {
            row.copy_from_slice(km);
        }
        let p = masked_softmax_forward(&scores, &mask, l).map_err(|_| NnError::AllMasked { op: "attention" })?;
        gemm(MatRef::row_major(&p, l, l), MatRef::row_major(vb, l, d), T::zero(), &mut out[b * l * d..][..l * d]);
        probs[b * l * l..][..l * l].copy_from_slice(&p);
    }
    Ok((out, probs))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    s: &AttnShape,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dv: Option<&mut [T]>,
) {
    let (l, d) = (s.len, s.dim);
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut dp = vec![T::zero(); l * l];
    let mut ds = vec![T::zero(); l * l];
    for b in 0..s.batch {
        let off = b * l * d;
        let p = &probs[b * l * l..][..l * l];
        let dob = &dout[off..][..l * d];
        if let Some(dv) = dv.as_deref_mut() {
            gemm(MatRef::transposed(p, l, l), MatRef::row_major(dob, l, d), T::one(), &mut dv[off..][..l * d]);
        }
        if dq.is_none() && dk.is_none() {
            continue;
        }
        gemm(MatRef::row_major(dob, l, d), MatRef::transposed(&v[off..][..l * d], l, d), T::zero(), &mut dp);
        ds.fill(T::zero());
        softmax_backward(p, &dp, l, &mut ds);
        for x in &mut ds {
            *x *= scale;
        }
        if let Some(dq) = dq.as_deref_mut() {
            gemm(MatRef::row_major(&ds, l, l), MatRef::row_major(&k[off..][..l * d], l, d), T::one(), &mut dq[off..][..l * d]);
        }
        if let Some(dk) = dk.as_deref_mut() {
            gemm(MatRef::transposed(&ds, l, l), MatRef::row_major(&q[off..][..l * d], l, d), T::one(), &mut dk[off..][..l * d]);
        }
    }
}

/// `softmax(Q·Kᵀ/√d) · V` with masked keys receiving zero weight.
/// Shapes are `[L,d]` or `[B,L,d]`; `key_mask` has `B·L` entries.
pub fn scaled_dot_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, key_mask: &[bool]) -> Result<Tensor<T>> {
    let s = AttnShape::infer(q.dims(), k.dims(), v.dims(), key_mask.len())?;
    let (out, _) = attention_forward(&s, q.data(), k.data(), v.data(), key_mask)?;
    Tensor::new(q.dims().to_vec(), out)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Returns normalized output plus per-row `(mean, 1/std)`.
pub(crate) fn layer_norm_forward<T: Real>(x: &[T], d: usize, gain: &[T], shift: &[T]) -> (Vec<T>, Vec<(T, T)>) {
    let eps = T::of(LAYER_NORM_EPS);
    let dn = T::of(d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut stats = Vec::with_capacity(x.len() / d);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let mean = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rstd = T::one() / (var + eps).sqrt();
        for (((o, &v), &g), &s) in yr.iter_mut().zip(xr).zip(gain).zip(shift) {
            *o = (v - mean) * rstd * g + s;
        }
        stats.push((mean, rstd));
    }
    (y, stats)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Real>(
    x: &[T],
    d: usize,
    gain: &[T],
    stats: &[(T, T)],
    dy: &[T],
    dx: Option<&mut [T]>,
    mut dgain: Option<&mut [T]>,
    mut dshift: Option<&mut [T]>,
) {
    let dn = T::of(d as f64);
    let mut dx = dx;
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for (row, (xr, gr)) in x.chunks_exact(d).zip(dy.chunks_exact(d)).enumerate() {
        let (mean, rstd) = stats[row];
        for i in 0..d {
            xhat[i] = (xr[i] - mean) * rstd;
            dxhat[i] = gr[i] * gain[i];
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for i in 0..d {
                dg[i] += gr[i] * xhat[i];
            }
        }
        if let Some(ds) = dshift.as_deref_mut() {
            for i in 0..d {
                ds[i] += gr[i];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let sum: T = dxhat.iter().copied().sum();
            let dot: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
            let dxr = &mut dx[row * d..][..d];
            for i in 0..d {
                dxr[i] += rstd / dn * (dn * dxhat[i] - sum - xhat[i] * dot);
            }
        }
    }
}

/// Normalizes each vector along the last axis to zero mean and unit variance
/// (epsilon 1e-5), then applies `gain` and `shift`.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if gain.len() != d || shift.len() != d {
        return shape_err("layer_norm", format!("gain/shift must have {d} entries"));
    }
    let (y, _) = layer_norm_forward(x.data(), d, gain.data(), shift.data());
    Tensor::new(x.dims().to_vec(), y)
}
