//! A small reverse-mode differentiation tape over [`Tensor`] values.
//!
//! Model code records every operation on a [`Graph`]; [`Graph::backward`]
//! then walks the tape in reverse and returns one gradient per registered
//! parameter. Parameters are borrowed from the [`ParamStore`], never copied.
//!
//! Spatial ops take their grid geometry explicitly; all values are stored as
//! `[rows, cols]` matrices (tokens x channels) or flat parameter tensors.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::interaction::{deform_sample_backward, deform_sample_raw, DeformGeom};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::primitives::{
    self, attention_backward, attention_raw, bilinear_resize_backward, bilinear_resize_raw, conv2d_backward,
    conv2d_raw, depthwise_backward, depthwise_raw, gelu, gelu_grad, group_norm_backward, group_norm_raw,
    layer_norm_backward, layer_norm_raw, matmul_backward, matmul_raw, AttnGroup, ConvGeom, NormStats,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    MulChannels(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, gain: Var, shift: Var, stats: NormStats },
    GroupNorm { x: Var, gain: Var, shift: Var, groups: usize, stats: NormStats },
    Gelu(Var),
    SliceCols { x: Var, start: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, groups: Vec<AttnGroup>, probs: Vec<Vec<f64>> },
    DeformSample { value: Var, offsets: Var, logits: Var, geom: DeformGeom, weights: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Depthwise { x: Var, w: Var, b: Option<Var>, h: usize, width: usize, k: usize, pad: usize },
    Resize { x: Var, h: usize, w: usize, oh: usize, ow: usize },
    Pad { x: Var, h: usize, w: usize, pw: usize },
    Crop { x: Var, w: usize, ch: usize, cw: usize },
    MeanRows(Var),
    Dot(Var, Vec<f64>),
    SoftmaxXent { logits: Var, label: usize, probs: Vec<f64> },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Borrowing the store keeps parameters immutable for the
/// lifetime of a forward/backward pass.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph { store, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.get(*id),
        }
    }

    fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// The tape variable for a parameter; repeated calls return the same variable.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn mat(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    // ---------------------------------------------------------------- ops

    /// `[n, k] x [k, m]`; the weight may be stored with any leading shape whose
    /// last axis is `m`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, k) = self.mat(x);
        let wt = self.value(w);
        let m = wt.cols();
        if wt.len() != k * m {
            return Err(Error::Shape(format!("matmul: [{n}, {k}] x {:?}", wt.shape())));
        }
        let out = matmul_raw(self.data(x), wt.data(), n, k, m);
        Ok(self.push(Tensor::from_rows(n, m, out)?, Op::MatMul(x, w), &[x, w]))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.mat(x);
        if self.value(b).len() != m {
            return Err(Error::Shape(format!("add_bias: bias length {} for {m} columns", self.value(b).len())));
        }
        let mut out = self.data(x).to_vec();
        primitives::add_bias_inplace(&mut out, self.data(b));
        Ok(self.push(Tensor::from_rows(n, m, out)?, Op::AddBias(x, b), &[x, b]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.mat(a);
        if self.value(b).len() != n * m {
            return Err(Error::Shape("add: operand sizes differ".into()));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(Tensor::from_rows(n, m, out)?, Op::Add(a, b), &[a, b]))
    }

    /// Per-channel scaling `x * g` with `g: [cols]`.
    pub fn mul_channels(&mut self, x: Var, g: Var) -> Result<Var> {
        let (n, m) = self.mat(x);
        if self.value(g).len() != m {
            return Err(Error::Shape("mul_channels: gate length differs from channels".into()));
        }
        let gv = self.data(g);
        let out: Vec<f64> = self.data(x).chunks(m).flat_map(|row| row.iter().zip(gv).map(|(a, b)| a * b)).collect();
        Ok(self.push(Tensor::from_rows(n, m, out)?, Op::MulChannels(x, g), &[x, g]))
    }

    /// `x * s` for a one-element parameter `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, m) = self.mat(x);
        if self.value(s).len() != 1 {
            return Err(Error::Shape("mul_scalar: expected a single-element tensor".into()));
        }
        let sv = self.data(s)[0];
        let out: Vec<f64> = self.data(x).iter().map(|v| v * sv).collect();
        Ok(self.push(Tensor::from_rows(n, m, out)?, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (n, m) = self.mat(x);
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        self.push(Tensor::from_rows(n, m, out).expect("shape"), Op::Scale(x, c), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (n, m) = self.mat(x);
        if self.value(gain).len() != m || self.value(shift).len() != m {
            return Err(Error::Shape("layer_norm: affine length differs from channels".into()));
        }
        let (out, stats) = layer_norm_raw(self.data(x), m, self.data(gain), self.data(shift), primitives::LN_EPS);
        Ok(self.push(Tensor::from_rows(n, m, out)?, Op::LayerNorm { x, gain, shift, stats }, &[x, gain, shift]))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gain: Var, shift: Var) -> Result<Var> {
        let (n, m) = self.mat(x);
        if groups == 0 || m % groups != 0 {
            return Err(Error::Shape(format!("group_norm: {m} channels not divisible into {groups} groups")));
        }
        let (out, stats) =
            group_norm_raw(self.data(x), m, groups, self.data(gain), self.data(shift), primitives::GN_EPS);
        Ok(self.push(
            Tensor::from_rows(n, m, out)?,
            Op::GroupNorm { x, gain, shift, groups, stats },
            &[x, gain, shift],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (n, m) = self.mat(x);
        let out: Vec<f64> = self.data(x).iter().map(|&v| gelu(v)).collect();
        self.push(Tensor::from_rows(n, m, out).expect("shape"), Op::Gelu(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.mat(x);
        if start + len > m {
            return Err(Error::Shape(format!("slice_cols: [{start}, {}) out of {m}", start + len)));
        }
        let out: Vec<f64> = self.data(x).chunks(m).flat_map(|row| row[start..start + len].iter().copied()).collect();
        Ok(self.push(Tensor::from_rows(n, len, out)?, Op::SliceCols { x, start }, &[x]))
    }

    /// Multi-head softmax attention restricted to `groups`.
    pub(crate) fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: Vec<AttnGroup>) -> Result<Var> {
        let (nq, d) = self.mat(q);
        let (nk, dk) = self.mat(k);
        if dk != d || self.mat(v) != (nk, d) || heads == 0 || d % heads != 0 {
            return Err(Error::Shape("attention: q/k/v shapes or head split disagree".into()));
        }
        let (out, probs) = attention_raw(self.data(q), self.data(k), self.data(v), d, heads, &groups, nq);
        Ok(self.push(Tensor::from_rows(nq, d, out)?, Op::Attention { q, k, v, heads, groups, probs }, &[q, k, v]))
    }

    pub(crate) fn deform_sample(&mut self, value: Var, offsets: Var, logits: Var, geom: DeformGeom) -> Result<Var> {
        let (nv, d) = self.mat(value);
        if nv != geom.vh * geom.vw
            || d != geom.dim
            || self.mat(offsets) != (geom.refs.len(), geom.heads * geom.points * 2)
            || self.mat(logits) != (geom.refs.len(), geom.heads * geom.points)
        {
            return Err(Error::Shape("deform_sample: value/offset/weight shapes disagree with geometry".into()));
        }
        let (out, weights) = deform_sample_raw(self.data(value), self.data(offsets), self.data(logits), &geom);
        let nq = geom.refs.len();
        Ok(self.push(
            Tensor::from_rows(nq, d, out)?,
            Op::DeformSample { value, offsets, logits, geom, weights },
            &[value, offsets, logits],
        ))
    }

    pub(crate) fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        if self.value(x).len() != geom.h * geom.w * geom.cin
            || self.value(w).len() != geom.kh * geom.kw * geom.cin * geom.cout
        {
            return Err(Error::Shape("conv2d: input or kernel size disagrees with geometry".into()));
        }
        let out = conv2d_raw(self.data(x), self.data(w), b.map(|b| self.data(b)), geom);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            Tensor::from_rows(geom.out_h() * geom.out_w(), geom.cout, out)?,
            Op::Conv2d { x, w, b, geom },
            &inputs,
        ))
    }

    /// Same-size depthwise convolution over an `h x width` grid.
    pub fn depthwise(&mut self, x: Var, w: Var, b: Option<Var>, h: usize, width: usize, k: usize) -> Result<Var> {
        let (n, c) = self.mat(x);
        if n != h * width || self.value(w).len() != k * k * c || k % 2 == 0 {
            return Err(Error::Shape("depthwise: input or kernel size disagrees with geometry".into()));
        }
        let pad = k / 2;
        let out = depthwise_raw(self.data(x), h, width, c, self.data(w), k, pad, b.map(|b| self.data(b)));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::from_rows(n, c, out)?, Op::Depthwise { x, w, b, h, width, k, pad }, &inputs))
    }

    /// Bilinear resize of token rows laid out on an `h x w` grid.
    pub fn resize(&mut self, x: Var, h: usize, w: usize, oh: usize, ow: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.len() / (h * w).max(1);
        if t.len() != h * w * c {
            return Err(Error::Shape("resize: value does not fit the grid".into()));
        }
        let out = bilinear_resize_raw(t.data(), h, w, c, oh, ow);
        Ok(self.push(Tensor::from_rows(oh * ow, c, out)?, Op::Resize { x, h, w, oh, ow }, &[x]))
    }

    /// Zero-pads an `h x w` token grid at the bottom/right to `ph x pw`.
    pub fn pad_grid(&mut self, x: Var, h: usize, w: usize, ph: usize, pw: usize) -> Result<Var> {
        let (n, c) = self.mat(x);
        if n != h * w || ph < h || pw < w {
            return Err(Error::Shape("pad_grid: bad geometry".into()));
        }
        let src = self.data(x);
        let mut out = vec![0.0; ph * pw * c];
        for y in 0..h {
            out[y * pw * c..(y * pw + w) * c].copy_from_slice(&src[y * w * c..(y + 1) * w * c]);
        }
        Ok(self.push(Tensor::from_rows(ph * pw, c, out)?, Op::Pad { x, h, w, pw }, &[x]))
    }

    /// Keeps the top-left `ch x cw` block of an `h x w` token grid.
    pub fn crop_grid(&mut self, x: Var, h: usize, w: usize, ch: usize, cw: usize) -> Result<Var> {
        let (n, c) = self.mat(x);
        if n != h * w || ch > h || cw > w {
            return Err(Error::Shape("crop_grid: bad geometry".into()));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(ch * cw * c);
        for y in 0..ch {
            out.extend_from_slice(&src[y * w * c..(y * w + cw) * c]);
        }
        Ok(self.push(Tensor::from_rows(ch * cw, c, out)?, Op::Crop { x, w, ch, cw }, &[x]))
    }

    /// Column means, `[n, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, c) = self.mat(x);
        let mut out = vec![0.0; c];
        for row in self.data(x).chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        self.push(Tensor::from_rows(1, c, out).expect("shape"), Op::MeanRows(x), &[x])
    }

    /// Scalar `<x, direction>`.
    pub fn dot(&mut self, x: Var, direction: Vec<f64>) -> Result<Var> {
        if direction.len() != self.value(x).len() {
            return Err(Error::Shape("dot: direction length differs".into()));
        }
        let s: f64 = self.data(x).iter().zip(&direction).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::from_rows(1, 1, vec![s])?, Op::Dot(x, direction), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.dot(x, vec![1.0; n]).expect("matching length")
    }

    /// Softmax cross-entropy of a single logit row against `label`.
    pub fn softmax_xent(&mut self, logits: Var, label: usize) -> Result<Var> {
        let l = self.data(logits);
        if label >= l.len() {
            return Err(Error::Range(format!("label {label} out of {} classes", l.len())));
        }
        let probs = primitives::softmax(l);
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        Ok(self.push(Tensor::from_rows(1, 1, vec![loss])?, Op::SoftmaxXent { logits, label, probs }, &[logits]))
    }

    // ----------------------------------------------------------- backward

    /// Gradients of the scalar `loss` w.r.t. every registered parameter
    /// (zero for parameters the loss does not reach).
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape("backward: loss must be a scalar".into()));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFiniteLoss(lv.data()[0]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Value::Param(_) = self.nodes[i].value {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let mut out = ParamGrads::zeros_like(self.store);
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &grads[v.0] {
                out.get_mut(id).data_mut().copy_from_slice(g);
            }
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn zeros_for(&self, v: Var) -> Vec<f64> {
        vec![0.0; self.value(v).len()]
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, d: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(&d) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(d),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(x, w) => {
                let (n, k) = self.mat(x);
                let m = self.value(w).cols();
                let mut dx = self.needs(x).then(|| self.zeros_for(x));
                let mut dw = self.needs(w).then(|| self.zeros_for(w));
                matmul_backward(self.data(x), self.data(w), g, n, k, m, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(d) = dx {
                    acc(x, d);
                }
                if let Some(d) = dw {
                    acc(w, d);
                }
            }
            &Op::AddBias(x, b) => {
                if self.needs(b) {
                    let m = self.value(b).len();
                    let mut db = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(b, db);
                }
                if self.needs(x) {
                    acc(x, g.to_vec());
                }
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    acc(a, g.to_vec());
                }
                if self.needs(b) {
                    acc(b, g.to_vec());
                }
            }
            &Op::MulChannels(x, gate) => {
                let gv = self.data(gate);
                let m = gv.len();
                if self.needs(x) {
                    let dx = g.chunks(m).flat_map(|row| row.iter().zip(gv).map(|(a, b)| a * b)).collect();
                    acc(x, dx);
                }
                if self.needs(gate) {
                    let mut dg = vec![0.0; m];
                    for (grow, xrow) in g.chunks(m).zip(self.data(x).chunks(m)) {
                        for c in 0..m {
                            dg[c] += grow[c] * xrow[c];
                        }
                    }
                    acc(gate, dg);
                }
            }
            &Op::MulScalar(x, s) => {
                let sv = self.data(s)[0];
                if self.needs(x) {
                    acc(x, g.iter().map(|v| v * sv).collect());
                }
                if self.needs(s) {
                    let ds: f64 = g.iter().zip(self.data(x)).map(|(a, b)| a * b).sum();
                    acc(s, vec![ds]);
                }
            }
            &Op::Scale(x, c) => acc(x, g.iter().map(|v| v * c).collect()),
            Op::LayerNorm { x, gain, shift, stats } => {
                let (x, gain, shift) = (*x, *gain, *shift);
                let m = self.value(gain).len();
                let mut dx = self.needs(x).then(|| self.zeros_for(x));
                let mut dg = self.needs(gain).then(|| vec![0.0; m]);
                let mut ds = self.needs(shift).then(|| vec![0.0; m]);
                layer_norm_backward(
                    self.data(x),
                    m,
                    self.data(gain),
                    stats,
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    ds.as_deref_mut(),
                );
                for (v, d) in [(x, dx), (gain, dg), (shift, ds)] {
                    if let Some(d) = d {
                        acc(v, d);
                    }
                }
            }
            Op::GroupNorm { x, gain, shift, groups, stats } => {
                let (x, gain, shift) = (*x, *gain, *shift);
                let m = self.value(gain).len();
                let mut dx = self.needs(x).then(|| self.zeros_for(x));
                let mut dg = self.needs(gain).then(|| vec![0.0; m]);
                let mut ds = self.needs(shift).then(|| vec![0.0; m]);
                group_norm_backward(
                    self.data(x),
                    m,
                    *groups,
                    self.data(gain),
                    stats,
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    ds.as_deref_mut(),
                );
                for (v, d) in [(x, dx), (gain, dg), (shift, ds)] {
                    if let Some(d) = d {
                        acc(v, d);
                    }
                }
            }
            &Op::Gelu(x) => {
                let dx = g.iter().zip(self.data(x)).map(|(a, &b)| a * gelu_grad(b)).collect();
                acc(x, dx);
            }
            &Op::SliceCols { x, start } => {
                let m = self.value(x).cols();
                let len = self.value(Var(i)).cols();
                let mut dx = self.zeros_for(x);
                for (drow, grow) in dx.chunks_mut(m).zip(g.chunks(len)) {
                    drow[start..start + len].copy_from_slice(grow);
                }
                acc(x, dx);
            }
            Op::Attention { q, k, v, heads, groups, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let d = self.value(q).cols();
                let mut dq = self.zeros_for(q);
                let mut dk = self.zeros_for(k);
                let mut dv = self.zeros_for(v);
                attention_backward(
                    self.data(q),
                    self.data(k),
                    self.data(v),
                    d,
                    *heads,
                    groups,
                    probs,
                    g,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, dvar) in [(q, dq), (k, dk), (v, dv)] {
                    if self.needs(var) {
                        acc(var, dvar);
                    }
                }
            }
            Op::DeformSample { value, offsets, logits, geom, weights } => {
                let (value, offsets, logits) = (*value, *offsets, *logits);
                let mut dval = self.zeros_for(value);
                let mut doff = self.zeros_for(offsets);
                let mut dlog = self.zeros_for(logits);
                deform_sample_backward(
                    self.data(value),
                    self.data(offsets),
                    weights,
                    geom,
                    g,
                    &mut dval,
                    &mut doff,
                    &mut dlog,
                );
                for (var, d) in [(value, dval), (offsets, doff), (logits, dlog)] {
                    if self.needs(var) {
                        acc(var, d);
                    }
                }
            }
            &Op::Conv2d { x, w, b, geom } => {
                let mut dx = self.needs(x).then(|| self.zeros_for(x));
                let mut dw = self.needs(w).then(|| self.zeros_for(w));
                let mut db = b.filter(|&b| self.needs(b)).map(|_| vec![0.0; geom.cout]);
                conv2d_backward(
                    self.data(x),
                    self.data(w),
                    g,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    acc(x, d);
                }
                if let Some(d) = dw {
                    acc(w, d);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    acc(b, d);
                }
            }
            &Op::Depthwise { x, w, b, h, width, k, pad } => {
                let c = self.value(x).cols();
                let mut dx = self.needs(x).then(|| self.zeros_for(x));
                let mut dw = self.needs(w).then(|| self.zeros_for(w));
                let mut db = b.filter(|&b| self.needs(b)).map(|_| vec![0.0; c]);
                depthwise_backward(
                    self.data(x),
                    h,
                    width,
                    c,
                    self.data(w),
                    k,
                    pad,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    acc(x, d);
                }
                if let Some(d) = dw {
                    acc(w, d);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    acc(b, d);
                }
            }
            &Op::Resize { x, h, w, oh, ow } => {
                let c = self.value(x).len() / (h * w);
                let mut dx = self.zeros_for(x);
                bilinear_resize_backward(g, h, w, c, oh, ow, &mut dx);
                acc(x, dx);
            }
            &Op::Pad { x, h, w, pw, .. } => {
                let c = self.value(x).cols();
                let mut dx = Vec::with_capacity(h * w * c);
                for y in 0..h {
                    dx.extend_from_slice(&g[y * pw * c..(y * pw + w) * c]);
                }
                acc(x, dx);
            }
            &Op::Crop { x, w, ch, cw, .. } => {
                let c = self.value(x).cols();
                let mut dx = self.zeros_for(x);
                for y in 0..ch {
                    dx[y * w * c..(y * w + cw) * c].copy_from_slice(&g[y * cw * c..(y + 1) * cw * c]);
                }
                acc(x, dx);
            }
            &Op::MeanRows(x) => {
                let (n, c) = self.mat(x);
                let mut dx = Vec::with_capacity(n * c);
                for _ in 0..n {
                    dx.extend(g.iter().map(|v| v / n as f64));
                }
                acc(x, dx);
            }
            Op::Dot(x, dir) => acc(*x, dir.iter().map(|d| d * g[0]).collect()),
            Op::SoftmaxXent { logits, label, probs } => {
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                d[*label] -= g[0];
                acc(*logits, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Initializer;

    fn fd_check(store: &mut ParamStore, build: impl Fn(&mut Graph) -> Var) {
        let grads = {
            let mut g = Graph::new(store);
            let loss = build(&mut g);
            g.backward(loss).unwrap()
        };
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for j in 0..store.get(id).len() {
                let orig = store.get(id).data()[j];
                let eval = |store: &ParamStore| {
                    let mut g = Graph::new(store);
                    let l = build(&mut g);
                    g.value(l).data()[0]
                };
                store.get_mut(id).data_mut()[j] = orig + 1e-6;
                let lp = eval(store);
                store.get_mut(id).data_mut()[j] = orig - 1e-6;
                let lm = eval(store);
                store.get_mut(id).data_mut()[j] = orig;
                let fd = (lp - lm) / 2e-6;
                let an = grads.get(id).data()[j];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{} [{j}]: fd {fd} vs {an}", store.name(id));
            }
        }
    }

    #[test]
    fn linear_norm_gelu_chain_gradients() {
        let mut init = Initializer::seeded(1);
        let mut store = ParamStore::new();
        let x = store.add("x", init.uniform(vec![5, 4], 1.0), false);
        let w = store.add("w", init.uniform(vec![4, 6], 1.0), true);
        let b = store.add("b", init.uniform(vec![6], 1.0), false);
        let lg = store.add("lg", init.uniform(vec![6], 1.0), false);
        let lb = store.add("lb", init.uniform(vec![6], 1.0), false);
        let gate = store.add("gate", init.uniform(vec![6], 1.0), false);
        let s = store.add("s", init.uniform(vec![1], 1.0), false);
        let dir: Vec<f64> = (0..30).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        fd_check(&mut store, |g| {
            let xv = g.param(x);
            let (wv, bv) = (g.param(w), g.param(b));
            let h = g.linear(xv, wv, Some(bv)).unwrap();
            let (lgv, lbv) = (g.param(lg), g.param(lb));
            let h = g.layer_norm(h, lgv, lbv).unwrap();
            let h = g.gelu(h);
            let gv = g.param(gate);
            let h = g.mul_channels(h, gv).unwrap();
            let sv = g.param(s);
            let h = g.mul_scalar(h, sv).unwrap();
            g.dot(h, dir.clone()).unwrap()
        });
    }

    #[test]
    fn spatial_ops_gradients() {
        let mut init = Initializer::seeded(2);
        let mut store = ParamStore::new();
        let x = store.add("x", init.uniform(vec![5 * 3, 4], 1.0), false);
        let w = store.add("w", init.uniform(vec![3, 3, 4, 2], 1.0), true);
        let b = store.add("b", init.uniform(vec![2], 1.0), false);
        let dw = store.add("dw", init.uniform(vec![3, 3, 2], 1.0), true);
        let gg = store.add("gg", init.uniform(vec![2], 1.0), false);
        let gb = store.add("gb", init.uniform(vec![2], 1.0), false);
        let n_out = 7 * 4 * 2;
        let dir: Vec<f64> = (0..n_out).map(|i| (i as f64 * 0.3).cos()).collect();
        fd_check(&mut store, |g| {
            let xv = g.param(x);
            let (wv, bv) = (g.param(w), g.param(b));
            let geom = ConvGeom { h: 5, w: 3, cin: 4, cout: 2, kh: 3, kw: 3, stride: 1, pad: 1 };
            let y = g.conv2d(xv, wv, Some(bv), geom).unwrap();
            let dwv = g.param(dw);
            let y = g.depthwise(y, dwv, None, 5, 3, 3).unwrap();
            let (a, c) = (g.param(gg), g.param(gb));
            let y = g.group_norm(y, 1, a, c).unwrap();
            let y = g.pad_grid(y, 5, 3, 6, 4).unwrap();
            let y = g.crop_grid(y, 6, 4, 5, 3).unwrap();
            let y = g.resize(y, 5, 3, 7, 4).unwrap();
            g.dot(y, dir.clone()).unwrap()
        });
    }

    #[test]
    fn attention_and_xent_gradients() {
        let mut init = Initializer::seeded(3);
        let mut store = ParamStore::new();
        let x = store.add("x", init.uniform(vec![6, 8], 1.0), false);
        let kv = store.add("kv", init.uniform(vec![4, 8], 1.0), false);
        fd_check(&mut store, |g| {
            let xv = g.param(x);
            let kvv = g.param(kv);
            let q = g.slice_cols(xv, 0, 4).unwrap();
            let k = g.slice_cols(kvv, 0, 4).unwrap();
            let v = g.slice_cols(kvv, 4, 4).unwrap();
            let o = g.attention(q, k, v, 2, primitives::full_group(6, 4)).unwrap();
            let m = g.mean_rows(o);
            g.softmax_xent(m, 1).unwrap()
        });
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::filled(vec![3], 2.0), true);
        let mut g = Graph::new(&store);
        let _ = g.param(w);
        let c = g.constant(Tensor::filled(vec![1, 1], 5.0));
        let grads = g.backward(c).unwrap();
        assert!(grads.get(w).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let c = g.constant(Tensor::filled(vec![1, 1], f64::NAN));
        assert!(matches!(g.backward(c), Err(Error::NonFiniteLoss(_))));
    }
}
