//! Minimal tensor and layer toolkit with reverse-mode gradients.
//!
//! Networks are trees of [`Module`]s whose leaves are [`Layer`]s. Layers do
//! not own their parameters; they hold indices into a [`ParamSet`] so the
//! whole model can be flattened, shipped and reassembled in a fixed order.
//! Activations use the `[batch, channels, height, width]` layout for
//! convolutional stages and `[batch, features]` for dense stages.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::rng::SimRng;

/// Negative slope of every LeakyReLU in the toolkit.
pub const LEAKY_SLOPE: f64 = 0.3;
/// Exponential averaging factor for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                expected: alloc::format!("{} elements with positive dims", data.len()),
                actual: alloc::format!("{shape:?}"),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err(shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch entry.
    pub fn per_sample(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Rows `start..end` along the batch axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let per = self.per_sample();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * per..end * per].to_vec(),
        }
    }

    /// Gathers batch rows by index.
    pub fn gather(&self, rows: &[usize]) -> Tensor {
        let per = self.per_sample();
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            data.extend_from_slice(&self.data[r * per..(r + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor { shape, data }
    }
}

/// Quantization-relevant classification of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Weight,
    Bias,
    Other,
}

impl Role {
    pub fn to_byte(self) -> u8 {
        match self {
            Role::Weight => 0,
            Role::Bias => 1,
            Role::Other => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Role::Weight),
            1 => Some(Role::Bias),
            2 => Some(Role::Other),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub role: Role,
    /// Running statistics are carried and transmitted but never receive gradients.
    pub trainable: bool,
}

/// Ordered, uniquely named parameter tensors of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        role: Role,
        trainable: bool,
    ) -> Result<usize> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::InvalidConfig(alloc::format!(
                "duplicate parameter name {name}"
            )));
        }
        self.entries.push(ParamEntry {
            name,
            tensor,
            role,
            trainable,
        });
        Ok(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].tensor
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].tensor
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn numel_with_role(&self, role: Role) -> usize {
        self.entries
            .iter()
            .filter(|e| e.role == role)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Start offset of every entry in the flattened vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.entries
            .iter()
            .map(|e| {
                let o = acc;
                acc += e.tensor.len();
                o
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for e in &self.entries {
            out.extend_from_slice(e.tensor.data());
        }
        out
    }

    /// Rebuilds a parameter set with `template`'s names, shapes and roles.
    pub fn unflatten(values: &[f64], template: &ParamSet) -> Result<ParamSet> {
        let mut out = template.clone();
        out.assign_flat(values)?;
        Ok(out)
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::LengthMismatch {
                expected: self.numel(),
                actual: values.len(),
            });
        }
        let mut at = 0;
        for e in &mut self.entries {
            let n = e.tensor.len();
            e.tensor.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Same names, shapes and roles in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.role == b.role && a.tensor.shape() == b.tensor.shape()
            })
    }

    /// Mask over the flattened vector: true where the scalar is trainable.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.numel());
        for e in &self.entries {
            m.extend(core::iter::repeat_n(e.trainable, e.tensor.len()));
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Stride-1 convolution with zero "same" padding. Weight shape
    /// `[out, in, kh, kw]`.
    Conv2d {
        weight: usize,
        bias: Option<usize>,
    },
    /// `y = x W^T + b`, weight shape `[out, in]`.
    Dense {
        weight: usize,
        bias: Option<usize>,
    },
    /// Per-channel normalization over batch and spatial axes.
    BatchNorm {
        gamma: usize,
        beta: usize,
        running_mean: usize,
        running_var: usize,
    },
    LeakyRelu,
    Sigmoid,
    /// `[n, ...] -> [n, prod(...)]`
    Flatten,
    /// `[n, prod(shape)] -> [n, shape...]`
    Reshape(Vec<usize>),
}

/// Network tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Module {
    Layer(Layer),
    Seq(Vec<Module>),
    /// Runs every branch on the same input and concatenates along channels.
    Concat(Vec<Module>),
    /// `x + alpha * body(x)` with a trainable scalar `alpha` (ReZero).
    Residual { body: alloc::boxed::Box<Module>, alpha: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch statistics observed by a training-mode batch-norm forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BnObservation {
    pub running_mean: usize,
    pub running_var: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Blends observed batch statistics into the running estimates.
pub fn apply_bn_observations(ps: &mut ParamSet, obs: &[BnObservation]) {
    for o in obs {
        for (r, &m) in ps.tensor_mut(o.running_mean).data_mut().iter_mut().zip(&o.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, &v) in ps.tensor_mut(o.running_var).data_mut().iter_mut().zip(&o.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }
}

/// Values retained by a training-mode forward for the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv { input: Tensor },
    Dense { input: Tensor },
    BatchNorm { xhat: Tensor, inv_std: Vec<f64> },
    LeakyRelu { input: Tensor },
    Sigmoid { output: Tensor },
    Reshape { in_shape: Vec<usize> },
}

#[derive(Debug, Clone)]
pub enum Cache {
    Layer(LayerCache),
    Seq(Vec<Cache>),
    Concat { channels: Vec<usize>, caches: Vec<Cache> },
    Residual { body_out: Tensor, body: alloc::boxed::Box<Cache> },
}

/// Flat gradient buffer aligned with [`ParamSet::flatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl Grads {
    pub fn zeros(ps: &ParamSet) -> Self {
        Self {
            offsets: ps.offsets(),
            data: vec![0.0; ps.numel()],
        }
    }

    fn slot(&mut self, ps: &ParamSet, idx: usize) -> &mut [f64] {
        let o = self.offsets[idx];
        &mut self.data[o..o + ps.tensor(idx).len()]
    }

    pub fn from_vec(ps: &ParamSet, data: Vec<f64>) -> Result<Self> {
        if data.len() != ps.numel() {
            return Err(Error::LengthMismatch {
                expected: ps.numel(),
                actual: data.len(),
            });
        }
        Ok(Self {
            offsets: ps.offsets(),
            data,
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

// ---------------------------------------------------------------------------
// GEMM wrapper

/// `C = A B + beta C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len());
        assert!(last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[inline]
fn same_pad(k: usize) -> usize {
    (k - 1) / 2
}

/// Target size of one chunk's patch matrix; chunks stay cache resident.
const CONV_CHUNK_BYTES: usize = 160 * 1024;

fn chunk_samples(kdim: usize, hw: usize) -> usize {
    (CONV_CHUNK_BYTES / (8 * kdim * hw).max(1)).max(1)
}

/// Unfolds `n` samples of `[c, h, w]` into the `[c*kh*kw, n*h*w]` patch
/// matrix `col`, writing every entry once.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], n: usize, c: usize, h: usize, w: usize, kh: usize, kw: usize, col: &mut [f64]) {
    let (ph, pw) = (same_pad(kh), same_pad(kw));
    let hw = h * w;
    let cols = n * hw;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let x_lo = pw.saturating_sub(j).min(w);
                let x_hi = (w + pw).saturating_sub(j).min(w).max(x_lo);
                for b in 0..n {
                    let src = &x[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                    for y in 0..h {
                        let d = &mut dst[b * hw + y * w..b * hw + (y + 1) * w];
                        let sy = y as isize + i as isize - ph as isize;
                        if sy < 0 || sy >= h as isize {
                            d.fill(0.0);
                            continue;
                        }
                        let s0 = sy as usize * w + x_lo + j - pw;
                        d[..x_lo].fill(0.0);
                        d[x_lo..x_hi].copy_from_slice(&src[s0..s0 + x_hi - x_lo]);
                        d[x_hi..].fill(0.0);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im(col: &[f64], n: usize, c: usize, h: usize, w: usize, kh: usize, kw: usize, x: &mut [f64]) {
    let (ph, pw) = (same_pad(kh), same_pad(kw));
    let hw = h * w;
    let cols = n * hw;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let src = &col[row * cols..(row + 1) * cols];
                let x_lo = pw.saturating_sub(j);
                let x_hi = (w + pw).saturating_sub(j).min(w);
                for b in 0..n {
                    let dst = &mut x[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + i as isize - ph as isize;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let d0 = sy as usize * w + x_lo + j - pw;
                        let s0 = b * hw + y * w + x_lo;
                        for (d, v) in dst[d0..d0 + x_hi - x_lo].iter_mut().zip(&src[s0..]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(shape_err(&[0, ws.get(1).copied().unwrap_or(0), 0, 0], xs));
    }
    Ok((xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3]))
}

/// Same-padded stride-1 convolution of `[n, ci, h, w]` with `[co, ci, kh, kw]`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, ci, h, wd, co, kh, kw) = conv_dims(x, w)?;
    if let Some(b) = b {
        if b.len() != co {
            return Err(shape_err(&[co], b.shape()));
        }
    }
    let hw = h * wd;
    let kdim = ci * kh * kw;
    let step = chunk_samples(kdim, hw).min(n.max(1));
    let mut col = vec![0.0; kdim * step * hw];
    let mut tmp = vec![0.0; co * step * hw];
    let mut y = vec![0.0; n * co * hw];
    for s0 in (0..n).step_by(step) {
        let nb = step.min(n - s0);
        let cols = nb * hw;
        let col = &mut col[..kdim * cols];
        im2col(&x.data()[s0 * ci * hw..(s0 + nb) * ci * hw], nb, ci, h, wd, kh, kw, col);
        gemm(co, kdim, cols, w.data(), kdim, 1, col, cols, 1, 0.0, &mut tmp, cols, 1);
        for o in 0..co {
            let bo = b.map_or(0.0, |b| b.data()[o]);
            for s in 0..nb {
                let dst = &mut y[((s0 + s) * co + o) * hw..((s0 + s) * co + o + 1) * hw];
                for (d, v) in dst.iter_mut().zip(&tmp[o * cols + s * hw..]) {
                    *d = v + bo;
                }
            }
        }
    }
    Tensor::new(vec![n, co, h, wd], y)
}

/// Gradients with respect to input, weight and bias, given the forward input.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, ci, h, wd, co, kh, kw) = conv_dims(x, w)?;
    if dy.shape() != [n, co, h, wd] {
        return Err(shape_err(&[n, co, h, wd], dy.shape()));
    }
    let hw = h * wd;
    let kdim = ci * kh * kw;
    let g = dy.data();
    let step = chunk_samples(kdim, hw).min(n.max(1));
    let mut col = vec![0.0; kdim * step * hw];
    let mut dcol = vec![0.0; kdim * step * hw];
    let mut gt = vec![0.0; co * step * hw];
    let mut dw = vec![0.0; co * kdim];
    let mut db = vec![0.0; co];
    let mut dx = vec![0.0; n * ci * hw];
    for s0 in (0..n).step_by(step) {
        let nb = step.min(n - s0);
        let cols = nb * hw;
        let xs = s0 * ci * hw..(s0 + nb) * ci * hw;
        let col = &mut col[..kdim * cols];
        im2col(&x.data()[xs.clone()], nb, ci, h, wd, kh, kw, col);
        // Regroup dY from [nb, co, hw] to [co, nb*hw] to match the patch matrix.
        for o in 0..co {
            for s in 0..nb {
                let src = &g[((s0 + s) * co + o) * hw..((s0 + s) * co + o + 1) * hw];
                gt[o * cols + s * hw..o * cols + (s + 1) * hw].copy_from_slice(src);
                db[o] += src.iter().sum::<f64>();
            }
        }
        let gt = &gt[..co * cols];
        gemm(co, cols, kdim, gt, cols, 1, col, 1, cols, 1.0, &mut dw, kdim, 1);
        let dcol = &mut dcol[..kdim * cols];
        gemm(kdim, co, cols, w.data(), 1, kdim, gt, cols, 1, 0.0, dcol, cols, 1);
        col2im(dcol, nb, ci, h, wd, kh, kw, &mut dx[xs]);
    }
    Ok((Tensor::new(x.shape().to_vec(), dx)?, dw, db))
}

// ---------------------------------------------------------------------------
// Dense

pub fn dense_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(shape_err(&[xs[0], ws.get(1).copied().unwrap_or(0)], xs));
    }
    let (n, fin, fout) = (xs[0], xs[1], ws[0]);
    let mut y = vec![0.0; n * fout];
    if let Some(b) = b {
        if b.len() != fout {
            return Err(shape_err(&[fout], b.shape()));
        }
        for row in y.chunks_mut(fout) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(n, fin, fout, x.data(), fin, 1, w.data(), 1, fin, 1.0, &mut y, fout, 1);
    Tensor::new(vec![n, fout], y)
}

pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    if dy.shape() != [n, fout] {
        return Err(shape_err(&[n, fout], dy.shape()));
    }
    let mut dw = vec![0.0; fout * fin];
    gemm(fout, n, fin, dy.data(), 1, fout, x.data(), fin, 1, 0.0, &mut dw, fin, 1);
    let mut dx = vec![0.0; n * fin];
    gemm(n, fout, fin, dy.data(), fout, 1, w.data(), fin, 1, 0.0, &mut dx, fin, 1);
    let mut db = vec![0.0; fout];
    for row in dy.data().chunks(fout) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok((Tensor::new(vec![n, fin], dx)?, dw, db))
}

// ---------------------------------------------------------------------------
// Batch normalization

fn bn_layout(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    let spatial: usize = s[2..].iter().product();
    (s[0], s[1], spatial)
}

/// Training-mode batch norm. Returns output, normalized input, inverse
/// standard deviations, batch means and biased batch variances.
pub fn batchnorm_forward_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>, Vec<f64>, Vec<f64>)> {
    if x.shape().len() < 2 || gamma.len() != x.shape()[1] || beta.len() != x.shape()[1] {
        return Err(shape_err(&[0, gamma.len()], x.shape()));
    }
    let (n, c, sp) = bn_layout(x);
    let count = (n * sp) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            *m += d[(b * c + ch) * sp..(b * c + ch + 1) * sp].iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    for b in 0..n {
        for ch in 0..c {
            var[ch] += d[(b * c + ch) * sp..(b * c + ch + 1) * sp]
                .iter()
                .map(|v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= count;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
    let mut xhat = vec![0.0; d.len()];
    let mut y = vec![0.0; d.len()];
    for b in 0..n {
        for ch in 0..c {
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in (b * c + ch) * sp..(b * c + ch + 1) * sp {
                xhat[i] = (d[i] - mean[ch]) * inv_std[ch];
                y[i] = g * xhat[i] + bt;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        Tensor::new(x.shape().to_vec(), xhat)?,
        inv_std,
        mean,
        var,
    ))
}

pub fn batchnorm_forward_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<Tensor> {
    if x.shape().len() < 2 || gamma.len() != x.shape()[1] {
        return Err(shape_err(&[0, gamma.len()], x.shape()));
    }
    let (n, c, sp) = bn_layout(x);
    let mut y = x.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / libm::sqrt(running_var.data()[ch] + BN_EPS);
            let (g, bt, m) = (gamma.data()[ch], beta.data()[ch], running_mean.data()[ch]);
            for v in &mut y[(b * c + ch) * sp..(b * c + ch + 1) * sp] {
                *v = g * (*v - m) * inv + bt;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

/// Backward of training-mode batch norm: `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    if dy.shape() != xhat.shape() {
        return Err(shape_err(xhat.shape(), dy.shape()));
    }
    let (n, c, sp) = bn_layout(xhat);
    let count = (n * sp) as f64;
    let (xh, g) = (xhat.data(), dy.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * sp..(b * c + ch + 1) * sp {
                dgamma[ch] += g[i] * xh[i];
                dbeta[ch] += g[i];
            }
        }
    }
    let mut dx = vec![0.0; g.len()];
    for b in 0..n {
        for ch in 0..c {
            let k = gamma.data()[ch] * inv_std[ch] / count;
            for i in (b * c + ch) * sp..(b * c + ch + 1) * sp {
                dx[i] = k * (count * g[i] - dbeta[ch] - xh[i] * dgamma[ch]);
            }
        }
    }
    Ok((Tensor::new(xhat.shape().to_vec(), dx)?, dgamma, dbeta))
}

// ---------------------------------------------------------------------------
// Activations and ReZero

pub fn leaky_relu_forward(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
        .collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

pub fn leaky_relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { LEAKY_SLOPE * g })
        .collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data().iter().map(|&v| sigmoid(v)).collect(),
    }
}

pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        shape: y.shape.clone(),
        data: y
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect(),
    }
}

/// `skip + alpha * branch`.
pub fn rezero_forward(skip: &Tensor, branch: &Tensor, alpha: f64) -> Result<Tensor> {
    if skip.shape() != branch.shape() {
        return Err(shape_err(skip.shape(), branch.shape()));
    }
    Ok(Tensor {
        shape: skip.shape.clone(),
        data: skip
            .data()
            .iter()
            .zip(branch.data())
            .map(|(&s, &b)| s + alpha * b)
            .collect(),
    })
}

/// Returns `(d_skip, d_branch, d_alpha)`.
pub fn rezero_backward(branch: &Tensor, alpha: f64, dy: &Tensor) -> (Tensor, Tensor, f64) {
    let dalpha = branch.data().iter().zip(dy.data()).map(|(b, g)| b * g).sum();
    let dbranch = Tensor {
        shape: dy.shape.clone(),
        data: dy.data().iter().map(|g| alpha * g).collect(),
    };
    (dy.clone(), dbranch, dalpha)
}

// ---------------------------------------------------------------------------
// Channel concatenation helpers

fn concat_channels(parts: &[Tensor]) -> Result<(Tensor, Vec<usize>)> {
    let first = parts[0].shape();
    let n = first[0];
    let spatial: usize = first[2..].iter().product();
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        if p.shape()[0] != n || p.shape()[2..] != first[2..] {
            return Err(shape_err(first, p.shape()));
        }
        channels.push(p.shape()[1]);
    }
    let total: usize = channels.iter().sum();
    let mut data = Vec::with_capacity(n * total * spatial);
    for b in 0..n {
        for (p, &c) in parts.iter().zip(&channels) {
            data.extend_from_slice(&p.data()[b * c * spatial..(b + 1) * c * spatial]);
        }
    }
    let mut shape = first.to_vec();
    shape[1] = total;
    Ok((Tensor::new(shape, data)?, channels))
}

fn split_channels(t: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let s = t.shape();
    let n = s[0];
    let spatial: usize = s[2..].iter().product();
    let total: usize = channels.iter().sum();
    let mut start = 0;
    channels
        .iter()
        .map(|&c| {
            let mut data = Vec::with_capacity(n * c * spatial);
            for b in 0..n {
                let base = (b * total + start) * spatial;
                data.extend_from_slice(&t.data()[base..base + c * spatial]);
            }
            start += c;
            let mut shape = s.to_vec();
            shape[1] = c;
            Tensor { shape, data }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Module tree

impl Layer {
    fn forward(
        &self,
        ps: &ParamSet,
        x: &Tensor,
        mode: Mode,
        obs: &mut Vec<BnObservation>,
    ) -> Result<(Tensor, Option<LayerCache>)> {
        let keep = mode == Mode::Train;
        match self {
            Layer::Conv2d { weight, bias } => {
                let y = conv2d_forward(x, ps.tensor(*weight), bias.map(|b| ps.tensor(b)))?;
                Ok((y, keep.then(|| LayerCache::Conv { input: x.clone() })))
            }
            Layer::Dense { weight, bias } => {
                let y = dense_forward(x, ps.tensor(*weight), bias.map(|b| ps.tensor(b)))?;
                Ok((y, keep.then(|| LayerCache::Dense { input: x.clone() })))
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => match mode {
                Mode::Train => {
                    let (y, xhat, inv_std, mean, var) =
                        batchnorm_forward_train(x, ps.tensor(*gamma), ps.tensor(*beta))?;
                    obs.push(BnObservation {
                        running_mean: *running_mean,
                        running_var: *running_var,
                        mean,
                        var,
                    });
                    Ok((y, Some(LayerCache::BatchNorm { xhat, inv_std })))
                }
                Mode::Infer => Ok((
                    batchnorm_forward_infer(
                        x,
                        ps.tensor(*gamma),
                        ps.tensor(*beta),
                        ps.tensor(*running_mean),
                        ps.tensor(*running_var),
                    )?,
                    None,
                )),
            },
            Layer::LeakyRelu => Ok((
                leaky_relu_forward(x),
                keep.then(|| LayerCache::LeakyRelu { input: x.clone() }),
            )),
            Layer::Sigmoid => {
                let y = sigmoid_forward(x);
                let cache = keep.then(|| LayerCache::Sigmoid { output: y.clone() });
                Ok((y, cache))
            }
            Layer::Flatten => {
                let in_shape = x.shape().to_vec();
                let y = x.clone().reshape(&[x.batch(), x.per_sample()])?;
                Ok((y, keep.then_some(LayerCache::Reshape { in_shape })))
            }
            Layer::Reshape(target) => {
                let in_shape = x.shape().to_vec();
                let mut shape = vec![x.batch()];
                shape.extend_from_slice(target);
                let y = x.clone().reshape(&shape)?;
                Ok((y, keep.then_some(LayerCache::Reshape { in_shape })))
            }
        }
    }

    fn backward(
        &self,
        ps: &ParamSet,
        cache: &LayerCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        match (self, cache) {
            (Layer::Conv2d { weight, bias }, LayerCache::Conv { input }) => {
                let (dx, dw, db) = conv2d_backward(input, ps.tensor(*weight), dy)?;
                add_into(grads.slot(ps, *weight), &dw);
                if let Some(b) = bias {
                    add_into(grads.slot(ps, *b), &db);
                }
                Ok(dx)
            }
            (Layer::Dense { weight, bias }, LayerCache::Dense { input }) => {
                let (dx, dw, db) = dense_backward(input, ps.tensor(*weight), dy)?;
                add_into(grads.slot(ps, *weight), &dw);
                if let Some(b) = bias {
                    add_into(grads.slot(ps, *b), &db);
                }
                Ok(dx)
            }
            (Layer::BatchNorm { gamma, beta, .. }, LayerCache::BatchNorm { xhat, inv_std }) => {
                let (dx, dg, db) = batchnorm_backward(xhat, inv_std, ps.tensor(*gamma), dy)?;
                add_into(grads.slot(ps, *gamma), &dg);
                add_into(grads.slot(ps, *beta), &db);
                Ok(dx)
            }
            (Layer::LeakyRelu, LayerCache::LeakyRelu { input }) => {
                Ok(leaky_relu_backward(input, dy))
            }
            (Layer::Sigmoid, LayerCache::Sigmoid { output }) => Ok(sigmoid_backward(output, dy)),
            (Layer::Flatten | Layer::Reshape(_), LayerCache::Reshape { in_shape }) => {
                dy.clone().reshape(in_shape)
            }
            _ => Err(Error::InvalidConfig("cache does not match layer".into())),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Module {
    pub fn seq(items: Vec<Module>) -> Self {
        Module::Seq(items)
    }

    pub fn layer(l: Layer) -> Self {
        Module::Layer(l)
    }

    /// Forward pass. In [`Mode::Train`] the returned cache is `Some` and
    /// batch-norm layers report their batch statistics into `obs`.
    pub fn forward(
        &self,
        ps: &ParamSet,
        x: &Tensor,
        mode: Mode,
        obs: &mut Vec<BnObservation>,
    ) -> Result<(Tensor, Option<Cache>)> {
        match self {
            Module::Layer(l) => {
                let (y, c) = l.forward(ps, x, mode, obs)?;
                Ok((y, c.map(Cache::Layer)))
            }
            Module::Seq(items) => {
                let mut caches = Vec::with_capacity(items.len());
                let mut cur: Option<Tensor> = None;
                for m in items {
                    let (y, c) = m.forward(ps, cur.as_ref().unwrap_or(x), mode, obs)?;
                    caches.extend(c);
                    cur = Some(y);
                }
                let out = cur.unwrap_or_else(|| x.clone());
                Ok((out, (mode == Mode::Train).then_some(Cache::Seq(caches))))
            }
            Module::Concat(branches) => {
                let mut outs = Vec::with_capacity(branches.len());
                let mut caches = Vec::with_capacity(branches.len());
                for b in branches {
                    let (y, c) = b.forward(ps, x, mode, obs)?;
                    outs.push(y);
                    caches.extend(c);
                }
                let (y, channels) = concat_channels(&outs)?;
                Ok((
                    y,
                    (mode == Mode::Train).then_some(Cache::Concat { channels, caches }),
                ))
            }
            Module::Residual { body, alpha } => {
                let a = ps.tensor(*alpha).data()[0];
                let (b, c) = body.forward(ps, x, mode, obs)?;
                let y = rezero_forward(x, &b, a)?;
                let cache = c.map(|c| Cache::Residual {
                    body_out: b,
                    body: alloc::boxed::Box::new(c),
                });
                Ok((y, cache))
            }
        }
    }

    /// Inference-mode forward (batch norm uses running statistics).
    pub fn infer(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut obs = Vec::new();
        Ok(self.forward(ps, x, Mode::Infer, &mut obs)?.0)
    }

    /// Propagates `dy` back through the cached forward, accumulating parameter
    /// gradients into `grads` and returning the input gradient.
    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &Cache,
        dy: Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        match (self, cache) {
            (Module::Layer(l), Cache::Layer(c)) => l.backward(ps, c, &dy, grads),
            (Module::Seq(items), Cache::Seq(caches)) => {
                let mut g = dy;
                for (m, c) in items.iter().zip(caches).rev() {
                    g = m.backward(ps, c, g, grads)?;
                }
                Ok(g)
            }
            (Module::Concat(branches), Cache::Concat { channels, caches }) => {
                let parts = split_channels(&dy, channels);
                let mut dx: Option<Tensor> = None;
                for ((b, c), g) in branches.iter().zip(caches).zip(parts) {
                    let d = b.backward(ps, c, g, grads)?;
                    match dx.as_mut() {
                        None => dx = Some(d),
                        Some(acc) => add_into(acc.data_mut(), d.data()),
                    }
                }
                dx.ok_or_else(|| Error::InvalidConfig("empty concat".into()))
            }
            (Module::Residual { body, alpha }, Cache::Residual { body_out, body: bc }) => {
                let a = ps.tensor(*alpha).data()[0];
                let (mut dskip, dbranch, dalpha) = rezero_backward(body_out, a, &dy);
                grads.slot(ps, *alpha)[0] += dalpha;
                let dbody = body.backward(ps, bc, dbranch, grads)?;
                add_into(dskip.data_mut(), dbody.data());
                Ok(dskip)
            }
            _ => Err(Error::InvalidConfig("cache does not match module".into())),
        }
    }
}

// ---------------------------------------------------------------------------
// Construction helpers

/// Glorot-uniform initialization bound.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    libm::sqrt(6.0 / (fan_in + fan_out) as f64)
}

fn glorot_tensor(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SimRng) -> Tensor {
    let lim = glorot_limit(fan_in, fan_out);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-lim..=lim)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Appends parameters to a [`ParamSet`] while producing the matching layers.
#[derive(Debug, Default)]
pub struct Builder {
    pub params: ParamSet,
}

impl Builder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        bias: bool,
        rng: &mut SimRng,
    ) -> Result<Module> {
        let (kh, kw) = kernel;
        let w = glorot_tensor(&[cout, cin, kh, kw], cin * kh * kw, cout * kh * kw, rng);
        let weight = self
            .params
            .push(alloc::format!("{name}.weight"), w, Role::Weight, true)?;
        let bias = if bias {
            Some(self.params.push(
                alloc::format!("{name}.bias"),
                Tensor::zeros(&[cout]),
                Role::Bias,
                true,
            )?)
        } else {
            None
        };
        Ok(Module::Layer(Layer::Conv2d { weight, bias }))
    }

    pub fn dense(
        &mut self,
        name: &str,
        fin: usize,
        fout: usize,
        bias: bool,
        rng: &mut SimRng,
    ) -> Result<Module> {
        let w = glorot_tensor(&[fout, fin], fin, fout, rng);
        let weight = self
            .params
            .push(alloc::format!("{name}.weight"), w, Role::Weight, true)?;
        let bias = if bias {
            Some(self.params.push(
                alloc::format!("{name}.bias"),
                Tensor::zeros(&[fout]),
                Role::Bias,
                true,
            )?)
        } else {
            None
        };
        Ok(Module::Layer(Layer::Dense { weight, bias }))
    }

    pub fn batchnorm(&mut self, name: &str, channels: usize) -> Result<Module> {
        let p = &mut self.params;
        let gamma = p.push(
            alloc::format!("{name}.gamma"),
            Tensor::full(&[channels], 1.0),
            Role::Other,
            true,
        )?;
        let beta = p.push(
            alloc::format!("{name}.beta"),
            Tensor::zeros(&[channels]),
            Role::Other,
            true,
        )?;
        let running_mean = p.push(
            alloc::format!("{name}.running_mean"),
            Tensor::zeros(&[channels]),
            Role::Other,
            false,
        )?;
        let running_var = p.push(
            alloc::format!("{name}.running_var"),
            Tensor::full(&[channels], 1.0),
            Role::Other,
            false,
        )?;
        Ok(Module::Layer(Layer::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        }))
    }

    /// ReZero residual around `body`, scalar initialized to zero.
    pub fn rezero(&mut self, name: &str, body: Module) -> Result<Module> {
        let alpha = self.params.push(
            alloc::format!("{name}.rezero"),
            Tensor::zeros(&[1]),
            Role::Other,
            true,
        )?;
        Ok(Module::Residual {
            body: alloc::boxed::Box::new(body),
            alpha,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn rand_tensor(shape: &[usize], rng: &mut SimRng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Direct-loop convolution used as an oracle for the im2col path.
    fn naive_conv(x: &Tensor, w: &Tensor) -> Vec<f64> {
        let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut y = vec![0.0; n * co * h * wd];
        for b in 0..n {
            for o in 0..co {
                for yy in 0..h {
                    for xx in 0..wd {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let sy = yy as isize + i as isize - ph as isize;
                                    let sx = xx as isize + j as isize - pw as isize;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((o * ci + c) * kh + i) * kw + j]
                                        * x.data()[((b * ci + c) * h + sy as usize) * wd
                                            + sx as usize];
                                }
                            }
                        }
                        y[((b * co + o) * h + yy) * wd + xx] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = rng_from_seed(1);
        for &(kh, kw) in &[(1, 1), (3, 3), (1, 9), (9, 1), (5, 5), (1, 5)] {
            let x = rand_tensor(&[3, 2, 6, 7], &mut rng);
            let w = rand_tensor(&[4, 2, kh, kw], &mut rng);
            let y = conv2d_forward(&x, &w, None).unwrap();
            let want = naive_conv(&x, &w);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = rng_from_seed(2);
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let b = Tensor::zeros(&[3]);
        let y = conv2d_forward(&x, &w, Some(&b)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[3, 5, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, None),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dense_rejects_feature_mismatch() {
        let x = Tensor::zeros(&[2, 4]);
        let w = Tensor::zeros(&[3, 5]);
        assert!(dense_forward(&x, &w, None).is_err());
    }

    #[test]
    fn rezero_at_zero_passes_skip_through() {
        let mut rng = rng_from_seed(3);
        let skip = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let branch = rand_tensor(&[2, 2, 3, 3], &mut rng);
        assert_eq!(rezero_forward(&skip, &branch, 0.0).unwrap(), skip);
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut rng = rng_from_seed(4);
        let x = rand_tensor(&[5, 3, 2, 2], &mut rng);
        let (_, xhat, _, _, _) =
            batchnorm_forward_train(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3])).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..5)
                .flat_map(|b| xhat.data()[(b * 3 + ch) * 4..(b * 3 + ch + 1) * 4].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut b = Builder::new();
        let bn = b.batchnorm("bn", 1).unwrap();
        let mut ps = b.params;
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let mut obs = Vec::new();
        bn.forward(&ps, &x, Mode::Train, &mut obs).unwrap();
        apply_bn_observations(&mut ps, &obs);
        assert!((ps.tensor(2).data()[0] - 0.2).abs() < 1e-15);
        assert!((ps.tensor(3).data()[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn infer_mode_keeps_no_cache() {
        let mut rng = rng_from_seed(5);
        let mut b = Builder::new();
        let conv = b.conv("c", 1, 2, (3, 3), true, &mut rng).unwrap();
        let x = rand_tensor(&[1, 1, 4, 4], &mut rng);
        let mut obs = Vec::new();
        let (_, cache) = conv.forward(&b.params, &x, Mode::Infer, &mut obs).unwrap();
        assert!(cache.is_none());
        let (_, cache) = conv.forward(&b.params, &x, Mode::Train, &mut obs).unwrap();
        assert!(cache.is_some());
    }

    #[test]
    fn flatten_round_trip_and_linearity() {
        let mut rng = rng_from_seed(6);
        let mut b = Builder::new();
        b.conv("a", 2, 3, (3, 3), true, &mut rng).unwrap();
        b.dense("d", 4, 2, true, &mut rng).unwrap();
        let ps = b.params;
        let flat = ps.flatten();
        let back = ParamSet::unflatten(&flat, &ps).unwrap();
        assert_eq!(back, ps);
        assert!(back
            .flatten()
            .iter()
            .zip(&flat)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let mut other = ps.clone();
        for v in other.tensor_mut(0).data_mut() {
            *v += 1.5;
        }
        let diff: Vec<f64> = other.flatten().iter().zip(&flat).map(|(a, b)| a - b).collect();
        let per_tensor: Vec<f64> = other
            .entries()
            .iter()
            .zip(ps.entries())
            .flat_map(|(a, b)| {
                a.tensor
                    .data()
                    .iter()
                    .zip(b.tensor.data())
                    .map(|(x, y)| x - y)
                    .collect::<Vec<_>>()
            })
            .collect();
        assert_eq!(diff, per_tensor);
        assert!(ParamSet::unflatten(&flat[1..], &ps).is_err());
        assert!(ParamSet::new().flatten().is_empty());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.push("a", Tensor::zeros(&[1]), Role::Bias, true).unwrap();
        assert!(ps.push("a", Tensor::zeros(&[1]), Role::Bias, true).is_err());
    }
}
