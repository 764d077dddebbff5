//! Cross-branch interaction units.
//!
//! For a direction `src -> dst` the unit computes
//!
//! ```text
//! F_hat   = F_dst + gamma * Attn(norm(F_dst), norm(FC(F_src)))
//! F_tilde = F_hat + tau * FFN(norm(F_hat))
//! ```
//!
//! with `gamma` and `tau` per-channel and zero at initialization, so a fresh
//! unit is an exact no-op. `Attn` is deformable cross-attention (sparse
//! bilinear sampling around each query's reference point) or, for ablations,
//! dense cross-attention.

use std::f64::consts::PI;

use crate::autograd::{Graph, Var};
use crate::config::{AttentionImpl, InteractionSchedule, PyramidConfig};
use crate::error::{Error, Result};
use crate::layers::{Linear, Norm};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::primitives::{full_group, sample_taps, softmax_inplace};
use crate::tensor::{FeatureMap, Tensor};

/// Token centers of a `grid_h x grid_w` grid in normalized coordinates, row-major.
pub fn reference_points(grid_h: usize, grid_w: usize) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(grid_h * grid_w);
    for i in 0..grid_h {
        for j in 0..grid_w {
            pts.push(((j as f64 + 0.5) / grid_w as f64, (i as f64 + 0.5) / grid_h as f64));
        }
    }
    pts
}

/// Geometry of one deformable sampling call.
#[derive(Debug, Clone)]
pub(crate) struct DeformGeom {
    pub refs: Vec<(f64, f64)>,
    pub vh: usize,
    pub vw: usize,
    pub heads: usize,
    pub points: usize,
    /// Channels of the (projected) value map.
    pub dim: usize,
}

impl DeformGeom {
    /// Pixel-space sampling position for query `q`, head `m`, point `k`.
    fn position(&self, offsets: &[f64], q: usize, m: usize, k: usize) -> (f64, f64) {
        let o = q * self.heads * self.points * 2 + (m * self.points + k) * 2;
        let (rx, ry) = self.refs[q];
        let x = rx + offsets[o] / self.vw as f64;
        let y = ry + offsets[o + 1] / self.vh as f64;
        (x * self.vw as f64 - 0.5, y * self.vh as f64 - 0.5)
    }
}

/// Returns the sampled-and-aggregated values `[nq, dim]` and the softmaxed
/// point weights `[nq, heads * points]`.
pub(crate) fn deform_sample_raw(value: &[f64], offsets: &[f64], logits: &[f64], geom: &DeformGeom) -> (Vec<f64>, Vec<f64>) {
    let nq = geom.refs.len();
    let (mh, kp, d) = (geom.heads, geom.points, geom.dim);
    let dh = d / mh;
    let mut weights = logits.to_vec();
    for chunk in weights.chunks_mut(kp) {
        softmax_inplace(chunk);
    }
    let mut out = vec![0.0; nq * d];
    for q in 0..nq {
        for m in 0..mh {
            let orow = &mut out[q * d + m * dh..q * d + (m + 1) * dh];
            for k in 0..kp {
                let a = weights[(q * mh + m) * kp + k];
                let (px, py) = geom.position(offsets, q, m, k);
                let taps = sample_taps(px, py, geom.vh, geom.vw);
                for t in 0..4 {
                    let Some(cell) = taps.idx[t] else { continue };
                    let wt = a * taps.w[t];
                    let vrow = &value[cell * d + m * dh..cell * d + (m + 1) * dh];
                    for (o, v) in orow.iter_mut().zip(vrow) {
                        *o += wt * v;
                    }
                }
            }
        }
    }
    (out, weights)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deform_sample_backward(
    value: &[f64],
    offsets: &[f64],
    weights: &[f64],
    geom: &DeformGeom,
    dout: &[f64],
    dvalue: &mut [f64],
    doffsets: &mut [f64],
    dlogits: &mut [f64],
) {
    let nq = geom.refs.len();
    let (mh, kp, d) = (geom.heads, geom.points, geom.dim);
    let dh = d / mh;
    let mut da = vec![0.0; kp];
    for q in 0..nq {
        for m in 0..mh {
            let g = &dout[q * d + m * dh..q * d + (m + 1) * dh];
            let base = (q * mh + m) * kp;
            for k in 0..kp {
                let a = weights[base + k];
                let (px, py) = geom.position(offsets, q, m, k);
                let taps = sample_taps(px, py, geom.vh, geom.vw);
                let (mut dsum, mut dpx, mut dpy) = (0.0, 0.0, 0.0);
                for t in 0..4 {
                    let Some(cell) = taps.idx[t] else { continue };
                    let off = cell * d + m * dh;
                    let vg: f64 = value[off..off + dh].iter().zip(g).map(|(v, x)| v * x).sum();
                    dsum += taps.w[t] * vg;
                    dpx += taps.dwdx[t] * vg;
                    dpy += taps.dwdy[t] * vg;
                    let wt = a * taps.w[t];
                    for (dv, x) in dvalue[off..off + dh].iter_mut().zip(g) {
                        *dv += wt * x;
                    }
                }
                da[k] = dsum;
                let o = q * mh * kp * 2 + (m * kp + k) * 2;
                doffsets[o] += a * dpx;
                doffsets[o + 1] += a * dpy;
            }
            let dot: f64 = (0..kp).map(|k| weights[base + k] * da[k]).sum();
            for k in 0..kp {
                dlogits[base + k] += weights[base + k] * (da[k] - dot);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Cross-attention variants
// ---------------------------------------------------------------------------

/// Deformable cross-attention: queries predict per-head sampling offsets
/// (in value-grid cells) and point weights around their reference point.
#[derive(Debug, Clone)]
pub struct DeformableCrossAttention {
    pub value_proj: Linear,
    pub output_proj: Linear,
    pub offset_head: Linear,
    pub weight_head: Linear,
    pub heads: usize,
    pub points: usize,
    pub query_dim: usize,
    pub inner_dim: usize,
}

impl DeformableCrossAttention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        query_dim: usize,
        inner_dim: usize,
        heads: usize,
        points: usize,
    ) -> Self {
        let offset_head = Linear::zeros(store, &format!("{name}.offset"), query_dim, heads * points * 2);
        // Initial sampling pattern: point k of head m sits k + 1 cells out along direction 2*pi*m/heads.
        let bias = store.get_mut(offset_head.bias).data_mut();
        for m in 0..heads {
            let theta = 2.0 * PI * m as f64 / heads as f64;
            let (c, s) = (theta.cos(), theta.sin());
            let norm = c.abs().max(s.abs());
            for k in 0..points {
                bias[(m * points + k) * 2] = c / norm * (k + 1) as f64;
                bias[(m * points + k) * 2 + 1] = s / norm * (k + 1) as f64;
            }
        }
        DeformableCrossAttention {
            value_proj: Linear::new(store, init, &format!("{name}.value_proj"), query_dim, inner_dim),
            output_proj: Linear::new(store, init, &format!("{name}.output_proj"), inner_dim, query_dim),
            offset_head,
            weight_head: Linear::zeros(store, &format!("{name}.attn_weight"), query_dim, heads * points),
            heads,
            points,
            query_dim,
            inner_dim,
        }
    }

    /// `query: [nq, D]` on a `qh x qw` grid, `value: [nv, D]` on a `vh x vw` grid.
    pub fn forward(&self, g: &mut Graph, query: Var, q_grid: (usize, usize), value: Var, v_grid: (usize, usize)) -> Result<Var> {
        let v = self.value_proj.forward(g, value)?;
        let offsets = self.offset_head.forward(g, query)?;
        let logits = self.weight_head.forward(g, query)?;
        let geom = DeformGeom {
            refs: reference_points(q_grid.0, q_grid.1),
            vh: v_grid.0,
            vw: v_grid.1,
            heads: self.heads,
            points: self.points,
            dim: self.inner_dim,
        };
        let s = g.deform_sample(v, offsets, logits, geom)?;
        self.output_proj.forward(g, s)
    }

    /// Plain copies of all weights, for the brute-force oracle.
    pub fn dump(&self, store: &ParamStore) -> DeformWeights {
        let get = |id: ParamId| store.get(id).data().to_vec();
        DeformWeights {
            value_w: get(self.value_proj.weight),
            value_b: get(self.value_proj.bias),
            out_w: get(self.output_proj.weight),
            out_b: get(self.output_proj.bias),
            offset_w: get(self.offset_head.weight),
            offset_b: get(self.offset_head.bias),
            attn_w: get(self.weight_head.weight),
            attn_b: get(self.weight_head.bias),
            heads: self.heads,
            points: self.points,
            query_dim: self.query_dim,
            inner_dim: self.inner_dim,
        }
    }
}

/// Weights of a [`DeformableCrossAttention`] as flat row-major `[in, out]` arrays.
#[derive(Debug, Clone)]
pub struct DeformWeights {
    pub value_w: Vec<f64>,
    pub value_b: Vec<f64>,
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
    pub offset_w: Vec<f64>,
    pub offset_b: Vec<f64>,
    pub attn_w: Vec<f64>,
    pub attn_b: Vec<f64>,
    pub heads: usize,
    pub points: usize,
    pub query_dim: usize,
    pub inner_dim: usize,
}

/// Dense multi-head cross-attention (every query attends to every value token).
#[derive(Debug, Clone)]
pub struct RegularCrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl RegularCrossAttention {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, dim: usize, heads: usize) -> Self {
        RegularCrossAttention {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, init, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, query: Var, value: Var) -> Result<Var> {
        let nq = g.value(query).rows();
        let nv = g.value(value).rows();
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, value)?;
        let v = self.v.forward(g, value)?;
        let a = g.attention(q, k, v, self.heads, full_group(nq, nv))?;
        self.o.forward(g, a)
    }
}

#[derive(Debug, Clone)]
pub enum CrossAttention {
    Deformable(DeformableCrossAttention),
    Regular(RegularCrossAttention),
}

impl CrossAttention {
    pub fn forward(&self, g: &mut Graph, query: Var, q_grid: (usize, usize), value: Var, v_grid: (usize, usize)) -> Result<Var> {
        match self {
            CrossAttention::Deformable(a) => a.forward(g, query, q_grid, value, v_grid),
            CrossAttention::Regular(a) => a.forward(g, query, value),
        }
    }
}

// ---------------------------------------------------------------------------
// Units
// ---------------------------------------------------------------------------

/// One direction of a unit: updates branch `dst` with information from `src`.
#[derive(Debug, Clone)]
pub struct DirectionalInteraction {
    pub src: usize,
    pub dst: usize,
    pub fc: Linear,
    pub query_norm: Norm,
    pub value_norm: Norm,
    pub attn: CrossAttention,
    pub ffn_norm: Norm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub gamma: ParamId,
    pub tau: ParamId,
}

/// The two gated residual terms of one direction.
pub(crate) struct DirectionTerms {
    pub attn: Var,
    pub ffn: Var,
}

impl DirectionalInteraction {
    fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cfg: &PyramidConfig,
        src: usize,
        dst: usize,
    ) -> Self {
        let it: &InteractionSchedule = &cfg.interactions;
        let dq = cfg.branch(dst).dim;
        let ds = cfg.branch(src).dim;
        let heads = it.heads_for(dq);
        let attn = match it.attention_impl {
            AttentionImpl::Deformable => CrossAttention::Deformable(DeformableCrossAttention::new(
                store,
                init,
                &format!("{name}.attn"),
                dq,
                it.inner_dim(dq),
                heads,
                it.deform_points,
            )),
            AttentionImpl::Regular => {
                CrossAttention::Regular(RegularCrossAttention::new(store, init, &format!("{name}.attn"), dq, heads))
            }
        };
        let hidden = it.ffn_hidden(dq);
        DirectionalInteraction {
            src,
            dst,
            fc: Linear::new(store, init, &format!("{name}.fc"), ds, dq),
            query_norm: Norm::new(store, &format!("{name}.query_norm"), dq),
            value_norm: Norm::new(store, &format!("{name}.value_norm"), dq),
            attn,
            ffn_norm: Norm::new(store, &format!("{name}.ffn_norm"), dq),
            ffn1: Linear::new(store, init, &format!("{name}.ffn.fc1"), dq, hidden),
            ffn2: Linear::new(store, init, &format!("{name}.ffn.fc2"), hidden, dq),
            gamma: store.add(format!("{name}.gamma"), Tensor::zeros(vec![dq]), false),
            tau: store.add(format!("{name}.tau"), Tensor::zeros(vec![dq]), false),
        }
    }

    /// `gamma * Attn(...)` and `tau * FFN(norm(F_dst + gamma * Attn(...)))`.
    pub(crate) fn terms(
        &self,
        g: &mut Graph,
        dst: Var,
        dst_grid: (usize, usize),
        src: Var,
        src_grid: (usize, usize),
    ) -> Result<DirectionTerms> {
        let q = self.query_norm.layer_norm(g, dst)?;
        let v = self.fc.forward(g, src)?;
        let v = self.value_norm.layer_norm(g, v)?;
        let a = self.attn.forward(g, q, dst_grid, v, src_grid)?;
        let gamma = g.param(self.gamma);
        let attn = g.mul_channels(a, gamma)?;
        let hat = g.add(dst, attn)?;
        let h = self.ffn_norm.layer_norm(g, hat)?;
        let h = self.ffn1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.ffn2.forward(g, h)?;
        let tau = g.param(self.tau);
        let ffn = g.mul_channels(h, tau)?;
        Ok(DirectionTerms { attn, ffn })
    }
}

/// Interaction unit between two branches `a < b`; holds whichever directions
/// the topology enables.
#[derive(Debug, Clone)]
pub struct InteractionUnit {
    pub a: usize,
    pub b: usize,
    /// Updates branch `a` from `b`.
    pub into_a: Option<DirectionalInteraction>,
    /// Updates branch `b` from `a`.
    pub into_b: Option<DirectionalInteraction>,
}

impl InteractionUnit {
    pub fn build(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cfg: &PyramidConfig,
        a: usize,
        b: usize,
    ) -> Self {
        let it = &cfg.interactions;
        let into_a = it
            .has(b, a)
            .then(|| DirectionalInteraction::new(store, init, &format!("{name}.to{a}"), cfg, b, a));
        let into_b = it
            .has(a, b)
            .then(|| DirectionalInteraction::new(store, init, &format!("{name}.to{b}"), cfg, a, b));
        InteractionUnit { a, b, into_a, into_b }
    }

    pub fn directions(&self) -> impl Iterator<Item = &DirectionalInteraction> {
        self.into_a.iter().chain(self.into_b.iter())
    }

    pub fn gates(&self) -> Vec<ParamId> {
        self.directions().flat_map(|d| [d.gamma, d.tau]).collect()
    }
}

/// Builds one unit per configured pair (sorted) for interaction point `index`.
pub fn build_units(store: &mut ParamStore, init: &mut Initializer, cfg: &PyramidConfig, index: usize) -> Vec<InteractionUnit> {
    cfg.interactions
        .unit_pairs()
        .into_iter()
        .map(|(a, b)| InteractionUnit::build(store, init, &format!("interactions.{index}.pair{a}{b}"), cfg, a, b))
        .collect()
}

/// Runs every unit of one interaction point. All units read the features as
/// they were on entry; a branch touched by several units accumulates their
/// updates in unit order.
pub(crate) fn interaction_point(
    g: &mut Graph,
    features: &[Var],
    grids: &[(usize, usize)],
    units: &[InteractionUnit],
) -> Result<Vec<Var>> {
    let mut deltas: Vec<Vec<Var>> = vec![Vec::new(); features.len()];
    for unit in units {
        if unit.a == 0 || unit.b > features.len() {
            return Err(Error::Validation(format!("unit {}-{} references a missing branch", unit.a, unit.b)));
        }
        for d in unit.directions() {
            let (di, si) = (d.dst - 1, d.src - 1);
            let t = d.terms(g, features[di], grids[di], features[si], grids[si])?;
            let delta = g.add(t.attn, t.ffn)?;
            deltas[di].push(delta);
        }
    }
    let mut out = Vec::with_capacity(features.len());
    for (f, ds) in features.iter().zip(deltas) {
        let mut x = *f;
        for d in ds {
            x = g.add(x, d)?;
        }
        out.push(x);
    }
    Ok(out)
}

fn grid_of(f: &FeatureMap) -> (usize, usize) {
    (f.grid_h, f.grid_w)
}

/// Deformable cross-attention of `query` over `value` (both already at the query width).
pub fn deform_attn(
    store: &ParamStore,
    attn: &DeformableCrossAttention,
    query: &FeatureMap,
    value: &FeatureMap,
) -> Result<Tensor> {
    if query.dim != attn.query_dim || value.dim != attn.query_dim {
        return Err(Error::Shape(format!(
            "deform_attn: query dim {} / value dim {} vs attention width {}",
            query.dim, value.dim, attn.query_dim
        )));
    }
    let mut g = Graph::new(store);
    let q = g.constant(query.to_matrix());
    let v = g.constant(value.to_matrix());
    let out = attn.forward(&mut g, q, grid_of(query), v, grid_of(value))?;
    Ok(g.value(out).clone())
}

/// Applies one unit to the pair `(f_i, f_j)`; returns the updated pair.
/// Directions not enabled on the unit pass their branch through unchanged.
pub fn interaction_unit_forward(
    store: &ParamStore,
    unit: &InteractionUnit,
    f_i: &FeatureMap,
    f_j: &FeatureMap,
) -> Result<(FeatureMap, FeatureMap)> {
    let (lo, hi) = (f_i.branch_id.min(f_j.branch_id), f_i.branch_id.max(f_j.branch_id));
    if (lo, hi) != (unit.a, unit.b) {
        return Err(Error::UnconfiguredPair(f_i.branch_id, f_j.branch_id));
    }
    let mut g = Graph::new(store);
    let vi = g.constant(f_i.to_matrix());
    let vj = g.constant(f_j.to_matrix());
    let update = |g: &mut Graph, d: Option<&DirectionalInteraction>, dst: Var, dg, src: Var, sg| -> Result<Var> {
        match d {
            None => Ok(dst),
            Some(d) => {
                let t = d.terms(g, dst, dg, src, sg)?;
                let hat = g.add(dst, t.attn)?;
                g.add(hat, t.ffn)
            }
        }
    };
    let (d_i, d_j) = if f_i.branch_id == unit.a {
        (unit.into_a.as_ref(), unit.into_b.as_ref())
    } else {
        (unit.into_b.as_ref(), unit.into_a.as_ref())
    };
    let out_i = update(&mut g, d_i, vi, grid_of(f_i), vj, grid_of(f_j))?;
    let out_j = update(&mut g, d_j, vj, grid_of(f_j), vi, grid_of(f_i))?;
    Ok((
        FeatureMap::from_tensor(g.value(out_i).clone(), f_i.grid_h, f_i.grid_w, f_i.branch_id)?,
        FeatureMap::from_tensor(g.value(out_j).clone(), f_j.grid_h, f_j.grid_w, f_j.branch_id)?,
    ))
}

/// Runs one interaction point over per-branch features (ordered by branch id).
pub fn apply_interaction_point(
    store: &ParamStore,
    features: &[FeatureMap],
    units: &[InteractionUnit],
) -> Result<Vec<FeatureMap>> {
    let mut g = Graph::new(store);
    let vars: Vec<Var> = features.iter().map(|f| g.constant(f.to_matrix())).collect();
    let grids: Vec<_> = features.iter().map(grid_of).collect();
    let out = interaction_point(&mut g, &vars, &grids, units)?;
    out.iter()
        .zip(features)
        .map(|(&v, f)| FeatureMap::from_tensor(g.value(v).clone(), f.grid_h, f.grid_w, f.branch_id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, Direction};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(gh: usize, gw: usize, dim: usize, id: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let data = (0..gh * gw * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(gh, gw, dim, id, data).unwrap()
    }

    fn randomize(store: &mut ParamStore, ids: &[ParamId], rng: &mut ChaCha8Rng, scale: f64) {
        for &id in ids {
            for v in store.get_mut(id).data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }

    #[test]
    fn reference_point_cases() {
        assert_eq!(reference_points(1, 1), vec![(0.5, 0.5)]);
        assert_eq!(reference_points(2, 2), vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]);
        assert!(reference_points(3, 7).iter().all(|&(x, y)| x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0));
    }

    #[test]
    fn zero_offsets_on_constant_value_collapse_to_projection() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = DeformableCrossAttention::new(&mut store, &mut Initializer::seeded(1), "a", 6, 6, 2, 3);
        randomize(&mut store, &[attn.value_proj.weight, attn.value_proj.bias, attn.output_proj.weight, attn.output_proj.bias, attn.weight_head.weight, attn.weight_head.bias], &mut rng, 0.5);
        for v in store.get_mut(attn.offset_head.bias).data_mut() {
            *v = 0.0;
        }
        let query = random_map(3, 3, 6, 1, &mut rng);
        let cval: Vec<f64> = (0..6).map(|c| c as f64 * 0.3 - 0.7).collect();
        let value = FeatureMap::new(4, 4, 6, 2, cval.repeat(16)).unwrap();
        let out = deform_attn(&store, &attn, &query, &value).unwrap();
        let vt = Tensor::from_rows(1, 6, cval).unwrap();
        let vp = crate::primitives::linear(&vt, store.get(attn.value_proj.weight), Some(store.get(attn.value_proj.bias))).unwrap();
        let expected = crate::primitives::linear(&vp, store.get(attn.output_proj.weight), Some(store.get(attn.output_proj.bias))).unwrap();
        for q in 0..9 {
            for c in 0..6 {
                assert!((out.row(q)[c] - expected.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fresh_unit_is_identity() {
        let cfg = preset("piip-tiny-test").unwrap();
        let mut store = ParamStore::new();
        let units = build_units(&mut store, &mut Initializer::seeded(0), &cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f1 = random_map(4, 4, 32, 1, &mut rng);
        let f2 = random_map(8, 8, 16, 2, &mut rng);
        let (o1, o2) = interaction_unit_forward(&store, &units[0], &f1, &f2).unwrap();
        assert_eq!((o1, o2), (f1.clone(), f2.clone()));
        let f3 = random_map(16, 16, 8, 3, &mut rng);
        assert!(matches!(
            interaction_unit_forward(&store, &units[0], &f1, &f3),
            Err(Error::UnconfiguredPair(1, 3))
        ));
    }

    #[test]
    fn gates_act_independently() {
        let cfg = preset("piip-tiny-test").unwrap();
        let mut store = ParamStore::new();
        let units = build_units(&mut store, &mut Initializer::seeded(0), &cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let into_b = units[0].into_b.as_ref().unwrap();
        randomize(&mut store, &[into_b.gamma], &mut rng, 1.0);
        let f1 = random_map(4, 4, 32, 1, &mut rng);
        let f2 = random_map(8, 8, 16, 2, &mut rng);
        let (o1, o2) = interaction_unit_forward(&store, &units[0], &f1, &f2).unwrap();
        assert_eq!(o1, f1);
        assert!(o2 != f2);
        // Argument order does not matter.
        let (p2, p1) = interaction_unit_forward(&store, &units[0], &f2, &f1).unwrap();
        assert_eq!((p1, p2), (o1, o2));
    }

    #[test]
    fn unidirectional_topology_leaves_source_untouched() {
        let mut cfg = preset("piip-tiny-test").unwrap();
        cfg.interactions.directions = vec![Direction { src: 1, dst: 2 }];
        let mut store = ParamStore::new();
        let units = build_units(&mut store, &mut Initializer::seeded(0), &cfg, 0);
        assert_eq!(units.len(), 1);
        assert!(units[0].into_a.is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ids: Vec<_> = store.ids().collect();
        randomize(&mut store, &ids, &mut rng, 0.3);
        let feats = vec![
            random_map(4, 4, 32, 1, &mut rng),
            random_map(8, 8, 16, 2, &mut rng),
            random_map(16, 16, 8, 3, &mut rng),
        ];
        let out = apply_interaction_point(&store, &feats, &units).unwrap();
        assert_eq!(out[0], feats[0]);
        assert_eq!(out[2], feats[2]);
        assert!(out[1] != feats[1]);
        assert_eq!(apply_interaction_point(&store, &feats, &[]).unwrap(), feats);
    }

    #[test]
    fn regular_attention_unit_runs() {
        let mut cfg = preset("piip-tiny-test").unwrap();
        cfg.interactions.attention_impl = AttentionImpl::Regular;
        let mut store = ParamStore::new();
        let units = build_units(&mut store, &mut Initializer::seeded(0), &cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ids: Vec<_> = store.ids().collect();
        randomize(&mut store, &ids, &mut rng, 0.3);
        let f1 = random_map(4, 4, 32, 1, &mut rng);
        let f2 = random_map(8, 8, 16, 2, &mut rng);
        let (o1, o2) = interaction_unit_forward(&store, &units[0], &f1, &f2).unwrap();
        assert!(o1.tokens().is_finite() && o2.tokens().is_finite());
        assert!(o1 != f1 && o2 != f2);
    }
}
