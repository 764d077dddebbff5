//! Numerical kernels shared by every model component.
//!
//! Each public kernel has a plain-tensor entry point. The `*_raw` forms and
//! the `*_backward` helpers operate on flat slices and are what the autograd
//! graph calls into.
//!
//! Spatial tensors are stored channel-last (`[h, w, c]`, row-major). Sampling
//! uses normalized coordinates in `[0, 1]^2` with pixel centers at
//! `(j + 0.5) / w` (align-corners = false).

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Tensor};

pub const LN_EPS: f64 = 1e-6;
pub const GN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Dense algebra
// ---------------------------------------------------------------------------

/// `[n, k] x [k, m] -> [n, m]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Gradients of `C = A B` given `dC`; accumulates into `da` / `db`.
pub(crate) fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dc: &[f64],
    n: usize,
    k: usize,
    m: usize,
    da: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(da) = da {
        for i in 0..n {
            let dcrow = &dc[i * m..(i + 1) * m];
            for p in 0..k {
                let brow = &b[p * m..(p + 1) * m];
                let s: f64 = dcrow.iter().zip(brow).map(|(x, y)| x * y).sum();
                da[i * k + p] += s;
            }
        }
    }
    if let Some(db) = db {
        for i in 0..n {
            let arow = &a[i * k..(i + 1) * k];
            let dcrow = &dc[i * m..(i + 1) * m];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let dbrow = &mut db[p * m..(p + 1) * m];
                for (d, &g) in dbrow.iter_mut().zip(dcrow) {
                    *d += av * g;
                }
            }
        }
    }
}

/// `y = x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if weight.shape().len() != 2 || weight.shape()[0] != x.cols() {
        return Err(Error::Shape(format!(
            "linear: input has {} columns, weight is {:?}",
            x.cols(),
            weight.shape()
        )));
    }
    let (n, k, m) = (x.rows(), x.cols(), weight.shape()[1]);
    let mut out = matmul_raw(x.data(), weight.data(), n, k, m);
    if let Some(b) = bias {
        if b.len() != m {
            return Err(Error::Shape(format!("linear: bias has {} entries, expected {}", b.len(), m)));
        }
        add_bias_inplace(&mut out, b.data());
    }
    let mut shape = x.shape().to_vec();
    if let Some(last) = shape.last_mut() {
        *last = m;
    } else {
        shape = vec![m];
    }
    Tensor::new(shape, out)
}

pub(crate) fn add_bias_inplace(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-row statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_raw(
    x: &[f64],
    cols: usize,
    gain: &[f64],
    shift: &[f64],
    eps: f64,
) -> (Vec<f64>, NormStats) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut stats = NormStats { mean: Vec::with_capacity(rows), rstd: Vec::with_capacity(rows) };
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for c in 0..cols {
            out[r * cols + c] = (xr[c] - mean) * rstd * gain[c] + shift[c];
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    (out, stats)
}

pub(crate) fn layer_norm_backward(
    x: &[f64],
    cols: usize,
    gain: &[f64],
    stats: &NormStats,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dgain: Option<&mut [f64]>,
    dshift: Option<&mut [f64]>,
) {
    let rows = x.len() / cols;
    let mut dx = dx;
    let mut dgain = dgain;
    let mut dshift = dshift;
    let mut xhat = vec![0.0; cols];
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        let dyr = &dy[r * cols..(r + 1) * cols];
        for c in 0..cols {
            xhat[c] = (x[r * cols + c] - mean) * rstd;
            dxhat[c] = dyr[c] * gain[c];
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for c in 0..cols {
                dg[c] += dyr[c] * xhat[c];
            }
        }
        if let Some(ds) = dshift.as_deref_mut() {
            for c in 0..cols {
                ds[c] += dyr[c];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let m1 = dxhat.iter().sum::<f64>() / cols as f64;
            let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
            for c in 0..cols {
                dx[r * cols + c] += rstd * (dxhat[c] - m1 - xhat[c] * m2);
            }
        }
    }
}

/// Normalizes each row (token) to zero mean / unit variance, then applies `gain` and `shift`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.cols();
    if gain.len() != c || shift.len() != c {
        return Err(Error::Shape(format!("layer_norm: affine length must be {c}")));
    }
    let (out, _) = layer_norm_raw(x.data(), c, gain.data(), shift.data(), eps);
    Tensor::new(x.shape().to_vec(), out)
}

/// Group statistics over `[spatial, channels]` data; `groups` contiguous channel blocks.
pub(crate) fn group_norm_raw(
    x: &[f64],
    channels: usize,
    groups: usize,
    gain: &[f64],
    shift: &[f64],
    eps: f64,
) -> (Vec<f64>, NormStats) {
    let spatial = x.len() / channels;
    let cg = channels / groups;
    let count = (spatial * cg) as f64;
    let mut out = vec![0.0; x.len()];
    let mut stats = NormStats { mean: Vec::with_capacity(groups), rstd: Vec::with_capacity(groups) };
    for g in 0..groups {
        let c0 = g * cg;
        let mut sum = 0.0;
        for s in 0..spatial {
            sum += x[s * channels + c0..s * channels + c0 + cg].iter().sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0;
        for s in 0..spatial {
            for v in &x[s * channels + c0..s * channels + c0 + cg] {
                sq += (v - mean) * (v - mean);
            }
        }
        let rstd = 1.0 / (sq / count + eps).sqrt();
        for s in 0..spatial {
            for c in c0..c0 + cg {
                let i = s * channels + c;
                out[i] = (x[i] - mean) * rstd * gain[c] + shift[c];
            }
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    (out, stats)
}

pub(crate) fn group_norm_backward(
    x: &[f64],
    channels: usize,
    groups: usize,
    gain: &[f64],
    stats: &NormStats,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dgain: Option<&mut [f64]>,
    dshift: Option<&mut [f64]>,
) {
    let spatial = x.len() / channels;
    let cg = channels / groups;
    let count = (spatial * cg) as f64;
    let mut dx = dx;
    let mut dgain = dgain;
    let mut dshift = dshift;
    for g in 0..groups {
        let (mean, rstd) = (stats.mean[g], stats.rstd[g]);
        let c0 = g * cg;
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for s in 0..spatial {
            for c in c0..c0 + cg {
                let i = s * channels + c;
                let xhat = (x[i] - mean) * rstd;
                let dxhat = dy[i] * gain[c];
                m1 += dxhat;
                m2 += dxhat * xhat;
                if let Some(dg) = dgain.as_deref_mut() {
                    dg[c] += dy[i] * xhat;
                }
                if let Some(ds) = dshift.as_deref_mut() {
                    ds[c] += dy[i];
                }
            }
        }
        m1 /= count;
        m2 /= count;
        if let Some(dx) = dx.as_deref_mut() {
            for s in 0..spatial {
                for c in c0..c0 + cg {
                    let i = s * channels + c;
                    let xhat = (x[i] - mean) * rstd;
                    dx[i] += rstd * (dy[i] * gain[c] - m1 - xhat * m2);
                }
            }
        }
    }
}

/// GroupNorm over the spatial grid of a feature map.
pub fn group_norm(x: &FeatureMap, groups: usize, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<FeatureMap> {
    if groups == 0 || x.dim % groups != 0 {
        return Err(Error::Shape(format!("group_norm: {} channels not divisible into {} groups", x.dim, groups)));
    }
    if gain.len() != x.dim || shift.len() != x.dim {
        return Err(Error::Shape(format!("group_norm: affine length must be {}", x.dim)));
    }
    let (out, _) = group_norm_raw(x.data(), x.dim, groups, gain.data(), shift.data(), eps);
    FeatureMap::new(x.grid_h, x.grid_w, x.dim, x.branch_id, out)
}

// ---------------------------------------------------------------------------
// Pointwise
// ---------------------------------------------------------------------------

/// Max-shifted softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_inplace(&mut out);
    out
}

pub(crate) fn softmax_inplace(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn gelu_tensor(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

// ---------------------------------------------------------------------------
// Bilinear interpolation
// ---------------------------------------------------------------------------

/// Source taps for one output coordinate of an align-corners=false resize.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisTap {
    pub i0: usize,
    pub i1: usize,
    pub t: f64,
}

pub(crate) fn resize_taps(input: usize, output: usize) -> Vec<AxisTap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let t = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            AxisTap { i0, i1, t }
        })
        .collect()
}

pub(crate) fn bilinear_resize_raw(x: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    if oh == h && ow == w {
        return x.to_vec();
    }
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut out = vec![0.0; oh * ow * c];
    for (oy, ay) in ty.iter().enumerate() {
        for (ox, ax) in tx.iter().enumerate() {
            let w00 = (1.0 - ay.t) * (1.0 - ax.t);
            let w01 = (1.0 - ay.t) * ax.t;
            let w10 = ay.t * (1.0 - ax.t);
            let w11 = ay.t * ax.t;
            let p00 = (ay.i0 * w + ax.i0) * c;
            let p01 = (ay.i0 * w + ax.i1) * c;
            let p10 = (ay.i1 * w + ax.i0) * c;
            let p11 = (ay.i1 * w + ax.i1) * c;
            let o = (oy * ow + ox) * c;
            for ch in 0..c {
                out[o + ch] =
                    w00 * x[p00 + ch] + w01 * x[p01 + ch] + w10 * x[p10 + ch] + w11 * x[p11 + ch];
            }
        }
    }
    out
}

pub(crate) fn bilinear_resize_backward(
    dy: &[f64],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    if oh == h && ow == w {
        for (d, g) in dx.iter_mut().zip(dy) {
            *d += g;
        }
        return;
    }
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    for (oy, ay) in ty.iter().enumerate() {
        for (ox, ax) in tx.iter().enumerate() {
            let weights = [
                ((1.0 - ay.t) * (1.0 - ax.t), ay.i0, ax.i0),
                ((1.0 - ay.t) * ax.t, ay.i0, ax.i1),
                (ay.t * (1.0 - ax.t), ay.i1, ax.i0),
                (ay.t * ax.t, ay.i1, ax.i1),
            ];
            let o = (oy * ow + ox) * c;
            for (wt, iy, ix) in weights {
                if wt == 0.0 {
                    continue;
                }
                let p = (iy * w + ix) * c;
                for ch in 0..c {
                    dx[p + ch] += wt * dy[o + ch];
                }
            }
        }
    }
}

/// Resizes an `[h, w, c]` tensor; edge taps are clamped.
pub fn bilinear_resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[0] == 0 || s[1] == 0 {
        return Err(Error::Shape(format!("bilinear_resize expects a non-empty [h, w, c] tensor, got {s:?}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("bilinear_resize: output size must be positive".into()));
    }
    let out = bilinear_resize_raw(img.data(), s[0], s[1], s[2], out_h, out_w);
    Tensor::new(vec![out_h, out_w, s[2]], out)
}

/// The up-to-four grid cells touched by a bilinear sample, with their weights
/// and the weights' derivatives w.r.t. the pixel-space coordinate.
/// Cells outside the grid are `None` (zero padding).
#[derive(Debug, Clone, Copy)]
pub(crate) struct SampleTaps {
    pub idx: [Option<usize>; 4],
    pub w: [f64; 4],
    pub dwdx: [f64; 4],
    pub dwdy: [f64; 4],
}

/// Taps at pixel-space position `(px, py)` (cell centers at integers).
pub(crate) fn sample_taps(px: f64, py: f64, h: usize, w: usize) -> SampleTaps {
    let x0 = px.floor();
    let y0 = py.floor();
    let tx = px - x0;
    let ty = py - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let cell = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            Some(y as usize * w + x as usize)
        } else {
            None
        }
    };
    SampleTaps {
        idx: [cell(x0, y0), cell(x0 + 1, y0), cell(x0, y0 + 1), cell(x0 + 1, y0 + 1)],
        w: [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty],
        dwdx: [-(1.0 - ty), 1.0 - ty, -ty, ty],
        dwdy: [-(1.0 - tx), -tx, 1.0 - tx, tx],
    }
}

/// Samples an `[h, w, c]` map at normalized `(x, y)` points; returns `[n, c]`.
pub fn bilinear_sample(map: &Tensor, points: &[(f64, f64)]) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 3 || s[0] == 0 || s[1] == 0 {
        return Err(Error::Shape(format!("bilinear_sample expects a non-empty [h, w, c] tensor, got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; points.len() * c];
    for (n, &(x, y)) in points.iter().enumerate() {
        let taps = sample_taps(x * w as f64 - 0.5, y * h as f64 - 0.5, h, w);
        let o = &mut out[n * c..(n + 1) * c];
        for t in 0..4 {
            if let Some(cell) = taps.idx[t] {
                let src = &map.data()[cell * c..(cell + 1) * c];
                for (ov, sv) in o.iter_mut().zip(src) {
                    *ov += taps.w[t] * sv;
                }
            }
        }
    }
    Tensor::new(vec![points.len(), c], out)
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Geometry of a 2-D convolution over channel-last data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn input_at(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
        let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
        if iy < 0 || ix < 0 || iy as usize >= self.h || ix as usize >= self.w {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }
}

/// Cross-correlation; `weight` is `[kh, kw, cin, cout]`.
pub(crate) fn conv2d_raw(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; oh * ow * g.cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * g.cout..(oy * ow + ox + 1) * g.cout];
            if let Some(b) = bias {
                o.copy_from_slice(b);
            }
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let Some((iy, ix)) = g.input_at(oy, ky, ox, kx) else { continue };
                    let xin = &x[(iy * g.w + ix) * g.cin..(iy * g.w + ix + 1) * g.cin];
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wbase = ((ky * g.kw + kx) * g.cin + ci) * g.cout;
                        for (ov, wv) in o.iter_mut().zip(&weight[wbase..wbase + g.cout]) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    g: ConvGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dx = dx;
    let mut dw = dw;
    if let Some(db) = db {
        for row in dy.chunks(g.cout) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    for oy in 0..oh {
        for ox in 0..ow {
            let dyr = &dy[(oy * ow + ox) * g.cout..(oy * ow + ox + 1) * g.cout];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let Some((iy, ix)) = g.input_at(oy, ky, ox, kx) else { continue };
                    let xoff = (iy * g.w + ix) * g.cin;
                    for ci in 0..g.cin {
                        let wbase = ((ky * g.kw + kx) * g.cin + ci) * g.cout;
                        let wrow = &weight[wbase..wbase + g.cout];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xoff + ci] += wrow.iter().zip(dyr).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            let xv = x[xoff + ci];
                            if xv != 0.0 {
                                for (d, gv) in dw[wbase..wbase + g.cout].iter_mut().zip(dyr) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Standard 2-D convolution (cross-correlation) of a feature map.
/// `kernel` is `[kh, kw, in_channels, out_channels]`.
pub fn conv2d(
    x: &FeatureMap,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<FeatureMap> {
    let ks = kernel.shape();
    if ks.len() != 4 || ks[2] != x.dim {
        return Err(Error::Shape(format!("conv2d: kernel {:?} does not accept {} input channels", ks, x.dim)));
    }
    if stride == 0 {
        return Err(Error::Shape("conv2d: stride must be positive".into()));
    }
    if x.grid_h + 2 * padding < ks[0] || x.grid_w + 2 * padding < ks[1] {
        return Err(Error::Shape("conv2d: kernel larger than padded input".into()));
    }
    if let Some(b) = bias {
        if b.len() != ks[3] {
            return Err(Error::Shape("conv2d: bias length must equal output channels".into()));
        }
    }
    let g = ConvGeom {
        h: x.grid_h,
        w: x.grid_w,
        cin: ks[2],
        cout: ks[3],
        kh: ks[0],
        kw: ks[1],
        stride,
        pad: padding,
    };
    let out = conv2d_raw(x.data(), kernel.data(), bias.map(|b| b.data()), g);
    FeatureMap::new(g.out_h(), g.out_w(), g.cout, x.branch_id, out)
}

/// Per-channel `k x k` convolution, stride 1; `weight` is `[k, k, c]`.
pub(crate) fn depthwise_raw(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    weight: &[f64],
    k: usize,
    pad: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            if let Some(b) = bias {
                o.copy_from_slice(b);
            }
            for ky in 0..k {
                let iy = (oy + ky) as i64 - pad as i64;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox + kx) as i64 - pad as i64;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let xin = &x[(iy as usize * w + ix as usize) * c..][..c];
                    let wk = &weight[(ky * k + kx) * c..][..c];
                    for ch in 0..c {
                        o[ch] += xin[ch] * wk[ch];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    weight: &[f64],
    k: usize,
    pad: usize,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;
    let mut dx = dx;
    let mut dw = dw;
    if let Some(db) = db {
        for row in dy.chunks(c) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    for oy in 0..oh {
        for ox in 0..ow {
            let g = &dy[(oy * ow + ox) * c..][..c];
            for ky in 0..k {
                let iy = (oy + ky) as i64 - pad as i64;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox + kx) as i64 - pad as i64;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let xoff = (iy as usize * w + ix as usize) * c;
                    let woff = (ky * k + kx) * c;
                    for ch in 0..c {
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xoff + ch] += g[ch] * weight[woff + ch];
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[woff + ch] += g[ch] * x[xoff + ch];
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise `k x k` convolution with stride 1; `kernel` is `[k, k, channels]`.
pub fn depthwise_conv(x: &FeatureMap, kernel: &Tensor, bias: Option<&Tensor>, padding: usize) -> Result<FeatureMap> {
    let ks = kernel.shape();
    if ks.len() != 3 || ks[0] != ks[1] || ks[2] != x.dim {
        return Err(Error::Shape(format!("depthwise_conv: kernel {:?} does not match {} channels", ks, x.dim)));
    }
    let k = ks[0];
    if x.grid_h + 2 * padding < k || x.grid_w + 2 * padding < k {
        return Err(Error::Shape("depthwise_conv: kernel larger than padded input".into()));
    }
    let out = depthwise_raw(x.data(), x.grid_h, x.grid_w, x.dim, kernel.data(), k, padding, bias.map(|b| b.data()));
    FeatureMap::new(x.grid_h + 2 * padding - k + 1, x.grid_w + 2 * padding - k + 1, x.dim, x.branch_id, out)
}

// ---------------------------------------------------------------------------
// Multi-head softmax attention over token groups
// ---------------------------------------------------------------------------

/// One attention group: queries attend only to the listed keys.
#[derive(Debug, Clone)]
pub(crate) struct AttnGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

/// Softmax attention for `q: [nq, d]`, `k, v: [nk, d]` split into `heads`.
/// Returns the output and the per-(group, head) probability matrices.
pub(crate) fn attention_raw(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    heads: usize,
    groups: &[AttnGroup],
    nq: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * d];
    let mut probs = Vec::with_capacity(groups.len() * heads);
    for g in groups {
        let (gq, gk) = (g.queries.len(), g.keys.len());
        for h in 0..heads {
            let off = h * dh;
            let mut p = vec![0.0; gq * gk];
            for (a, &qi) in g.queries.iter().enumerate() {
                let qrow = &q[qi * d + off..qi * d + off + dh];
                let prow = &mut p[a * gk..(a + 1) * gk];
                for (b, &ki) in g.keys.iter().enumerate() {
                    let krow = &k[ki * d + off..ki * d + off + dh];
                    prow[b] = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                }
                softmax_inplace(prow);
                let orow = &mut out[qi * d + off..qi * d + off + dh];
                for (b, &ki) in g.keys.iter().enumerate() {
                    let pv = prow[b];
                    for (o, vv) in orow.iter_mut().zip(&v[ki * d + off..ki * d + off + dh]) {
                        *o += pv * vv;
                    }
                }
            }
            probs.push(p);
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    heads: usize,
    groups: &[AttnGroup],
    probs: &[Vec<f64>],
    dout: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for (gi, g) in groups.iter().enumerate() {
        let gk = g.keys.len();
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[gi * heads + h];
            let mut ds = vec![0.0; gk];
            for (a, &qi) in g.queries.iter().enumerate() {
                let prow = &p[a * gk..(a + 1) * gk];
                let dorow = &dout[qi * d + off..qi * d + off + dh];
                let mut dot = 0.0;
                for (b, &ki) in g.keys.iter().enumerate() {
                    let vrow = &v[ki * d + off..ki * d + off + dh];
                    let dp: f64 = dorow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                    ds[b] = dp;
                    dot += dp * prow[b];
                    let dvrow = &mut dv[ki * d + off..ki * d + off + dh];
                    for (dvv, dov) in dvrow.iter_mut().zip(dorow) {
                        *dvv += prow[b] * dov;
                    }
                }
                for b in 0..gk {
                    ds[b] = prow[b] * (ds[b] - dot) * scale;
                }
                let qrow = &q[qi * d + off..qi * d + off + dh];
                for (b, &ki) in g.keys.iter().enumerate() {
                    if ds[b] == 0.0 {
                        continue;
                    }
                    let krow = &k[ki * d + off..ki * d + off + dh];
                    let dqrow = &mut dq[qi * d + off..qi * d + off + dh];
                    for (x, kv) in dqrow.iter_mut().zip(krow) {
                        *x += ds[b] * kv;
                    }
                    let dkrow = &mut dk[ki * d + off..ki * d + off + dh];
                    for (x, qv) in dkrow.iter_mut().zip(qrow) {
                        *x += ds[b] * qv;
                    }
                }
            }
        }
    }
}

/// Non-overlapping `side x side` windows over a `gh x gw` grid (both divisible by `side`).
pub(crate) fn window_groups(gh: usize, gw: usize, side: usize) -> Vec<AttnGroup> {
    let mut groups = Vec::with_capacity((gh / side) * (gw / side));
    for wy in 0..gh / side {
        for wx in 0..gw / side {
            let mut idx = Vec::with_capacity(side * side);
            for y in 0..side {
                for x in 0..side {
                    idx.push((wy * side + y) * gw + wx * side + x);
                }
            }
            groups.push(AttnGroup { queries: idx.clone(), keys: idx });
        }
    }
    groups
}

pub(crate) fn full_group(nq: usize, nk: usize) -> Vec<AttnGroup> {
    vec![AttnGroup { queries: (0..nq).collect(), keys: (0..nk).collect() }]
}

/// Multi-head scaled dot-product attention; `window = Some((gh, gw, side))`
/// restricts each query of a `gh x gw` token grid to its `side x side` window.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    window: Option<(usize, usize, usize)>,
) -> Result<Tensor> {
    let d = q.cols();
    if heads == 0 || d % heads != 0 || k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention: q {:?}, k {:?}, v {:?} with {heads} heads",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (nq, nk) = (q.rows(), k.rows());
    let groups = match window {
        None => full_group(nq, nk),
        Some((gh, gw, side)) => {
            if side == 0 || gh % side != 0 || gw % side != 0 || nq != gh * gw || nk != nq {
                return Err(Error::Shape(format!("attention: {gh}x{gw} grid does not tile into {side}-windows")));
            }
            window_groups(gh, gw, side)
        }
    };
    let (out, _) = attention_raw(q.data(), k.data(), v.data(), d, heads, &groups, nq);
    Tensor::from_rows(nq, d, out)
}
