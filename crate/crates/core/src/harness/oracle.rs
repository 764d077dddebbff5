//! Scalar-loop reference implementations. Nothing here calls into the main
//! kernels; every routine is a direct transcription of its definition.

use crate::interaction::DeformWeights;
use crate::tensor::{FeatureMap, Tensor};

/// `erf` by its Maclaurin series; accurate to ~1e-14 for `|x| <= 3`.
pub fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -x * x / n;
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() < 1e-17 * sum.abs().max(1e-300) {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf_series(x / 2f64.sqrt()))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `x: [n, k]`, `w: [k, m]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, k, m) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = b.map_or(0.0, |b| b.data()[j]);
            for t in 0..k {
                acc += x.data()[i * k + t] * w.data()[t * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    Tensor::new(vec![n, m], out).unwrap()
}

fn normalize(vals: &[f64], eps: f64) -> Vec<f64> {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    vals.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

/// Row-wise LayerNorm of `[n, c]`.
pub fn layer_norm(x: &Tensor, gain: &[f64], shift: &[f64], eps: f64) -> Tensor {
    let c = *x.shape().last().unwrap();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        for (j, v) in normalize(row, eps).into_iter().enumerate() {
            out.push(v * gain[j] + shift[j]);
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// GroupNorm over contiguous channel groups, statistics over all positions.
pub fn group_norm(x: &FeatureMap, groups: usize, gain: &[f64], shift: &[f64], eps: f64) -> FeatureMap {
    let (n, c) = (x.num_tokens(), x.dim);
    let cg = c / groups;
    let mut out = vec![0.0; n * c];
    for g in 0..groups {
        let mut vals = Vec::with_capacity(n * cg);
        for p in 0..n {
            for j in 0..cg {
                vals.push(x.data()[p * c + g * cg + j]);
            }
        }
        let z = normalize(&vals, eps);
        for p in 0..n {
            for j in 0..cg {
                let ch = g * cg + j;
                out[p * c + ch] = z[p * cg + j] * gain[ch] + shift[ch];
            }
        }
    }
    FeatureMap::new(x.grid_h, x.grid_w, c, x.branch_id, out).unwrap()
}

/// Align-corners=false resize of `[h, w, c]` with edge clamping.
pub fn bilinear_resize(img: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let at = |y: usize, x: usize, ch: usize| img.data()[(y * w + x) * c + ch];
    let coord = |o: usize, inp: usize, out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, if hi == lo { 0.0 } else { s - lo as f64 })
    };
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        let (y0, y1, ty) = coord(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, tx) = coord(ox, w, ow);
            for ch in 0..c {
                let top = at(y0, x0, ch) * (1.0 - tx) + at(y0, x1, ch) * tx;
                let bot = at(y1, x0, ch) * (1.0 - tx) + at(y1, x1, ch) * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out).unwrap()
}

/// One scalar bilinear read of channel `ch` of a row-major `[h, w, c]`
/// buffer at pixel position `(px, py)`; taps outside the map read zero.
pub fn sample_scalar(data: &[f64], h: usize, w: usize, c: usize, ch: usize, px: f64, py: f64) -> f64 {
    let read = |x: f64, y: f64| -> f64 {
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            0.0
        } else {
            data[(y as usize * w + x as usize) * c + ch]
        }
    };
    let (fx, fy) = (px.floor(), py.floor());
    let (ax, ay) = (px - fx, py - fy);
    read(fx, fy) * (1.0 - ax) * (1.0 - ay)
        + read(fx + 1.0, fy) * ax * (1.0 - ay)
        + read(fx, fy + 1.0) * (1.0 - ax) * ay
        + read(fx + 1.0, fy + 1.0) * ax * ay
}

/// Normalized-coordinate sampling of `[h, w, c]` at each point.
pub fn bilinear_sample(map: &Tensor, points: &[(f64, f64)]) -> Tensor {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let mut out = Vec::with_capacity(points.len() * c);
    for &(x, y) in points {
        for ch in 0..c {
            out.push(sample_scalar(map.data(), h, w, c, ch, x * w as f64 - 0.5, y * h as f64 - 0.5));
        }
    }
    Tensor::new(vec![points.len(), c], out).unwrap()
}

/// Zero-padded cross-correlation, kernel `[kh, kw, cin, cout]`.
pub fn conv2d(x: &FeatureMap, k: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> FeatureMap {
    let (kh, kw, cin, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let oh = (x.grid_h + 2 * pad - kh) / stride + 1;
    let ow = (x.grid_w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = b.map_or(0.0, |b| b.data()[co]);
                for dy in 0..kh {
                    for dx in 0..kw {
                        let iy = (oy * stride + dy) as i64 - pad as i64;
                        let ix = (ox * stride + dx) as i64 - pad as i64;
                        if iy < 0 || ix < 0 || iy >= x.grid_h as i64 || ix >= x.grid_w as i64 {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.at(iy as usize, ix as usize, ci) * k.data()[((dy * kw + dx) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = acc;
            }
        }
    }
    FeatureMap::new(oh, ow, cout, x.branch_id, out).unwrap()
}

/// Per-channel convolution, kernel `[k, k, c]`, stride 1.
pub fn depthwise(x: &FeatureMap, k: &Tensor, b: Option<&Tensor>, pad: usize) -> FeatureMap {
    let (ks, c) = (k.shape()[0], x.dim);
    let oh = x.grid_h + 2 * pad - ks + 1;
    let ow = x.grid_w + 2 * pad - ks + 1;
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = b.map_or(0.0, |b| b.data()[ch]);
                for dy in 0..ks {
                    for dx in 0..ks {
                        let iy = (oy + dy) as i64 - pad as i64;
                        let ix = (ox + dx) as i64 - pad as i64;
                        if iy >= 0 && ix >= 0 && iy < x.grid_h as i64 && ix < x.grid_w as i64 {
                            acc += x.at(iy as usize, ix as usize, ch) * k.data()[(dy * ks + dx) * c + ch];
                        }
                    }
                }
                out[(oy * ow + ox) * c + ch] = acc;
            }
        }
    }
    FeatureMap::new(oh, ow, c, x.branch_id, out).unwrap()
}

/// Multi-head attention; with `window = Some((gh, gw, side))` query `i` may
/// only see keys in the same `side x side` tile of the grid.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, window: Option<(usize, usize, usize)>) -> Tensor {
    let (nq, d, nk) = (q.shape()[0], q.shape()[1], k.shape()[0]);
    let dh = d / heads;
    let tile = |i: usize| window.map(|(_, gw, s)| ((i / gw) / s, (i % gw) / s));
    let mut out = vec![0.0; nq * d];
    for i in 0..nq {
        for h in 0..heads {
            let keys: Vec<usize> = (0..nk).filter(|&j| tile(i) == tile(j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    let mut s = 0.0;
                    for t in 0..dh {
                        s += q.data()[i * d + h * dh + t] * k.data()[j * d + h * dh + t];
                    }
                    s / (dh as f64).sqrt()
                })
                .collect();
            let p = softmax(&scores);
            for (a, &j) in keys.iter().enumerate() {
                for t in 0..dh {
                    out[i * d + h * dh + t] += p[a] * v.data()[j * d + h * dh + t];
                }
            }
        }
    }
    Tensor::new(vec![nq, d], out).unwrap()
}

fn dot_col(row: &[f64], w: &[f64], cols: usize, j: usize) -> f64 {
    row.iter().enumerate().map(|(t, x)| x * w[t * cols + j]).sum()
}

/// Deformable cross-attention by explicit loops over queries, heads and
/// points, from a plain weight dump.
pub fn brute_force_deform_attn(query: &FeatureMap, value: &FeatureMap, wts: &DeformWeights) -> Tensor {
    let (dq, di, mh, kp) = (wts.query_dim, wts.inner_dim, wts.heads, wts.points);
    let dh = di / mh;
    let (vh, vw) = (value.grid_h, value.grid_w);
    // Projected values.
    let mut vp = vec![0.0; value.num_tokens() * di];
    for p in 0..value.num_tokens() {
        let row = &value.data()[p * dq..(p + 1) * dq];
        for j in 0..di {
            vp[p * di + j] = dot_col(row, &wts.value_w, di, j) + wts.value_b[j];
        }
    }
    let mut out = vec![0.0; query.num_tokens() * dq];
    for qi in 0..query.grid_h {
        for qj in 0..query.grid_w {
            let q = qi * query.grid_w + qj;
            let row = &query.data()[q * dq..(q + 1) * dq];
            let ref_x = (qj as f64 + 0.5) / query.grid_w as f64;
            let ref_y = (qi as f64 + 0.5) / query.grid_h as f64;
            let mut sampled = vec![0.0; di];
            for m in 0..mh {
                let logits: Vec<f64> =
                    (0..kp).map(|k| dot_col(row, &wts.attn_w, mh * kp, m * kp + k) + wts.attn_b[m * kp + k]).collect();
                let a = softmax(&logits);
                for k in 0..kp {
                    let ox = dot_col(row, &wts.offset_w, mh * kp * 2, (m * kp + k) * 2) + wts.offset_b[(m * kp + k) * 2];
                    let oy =
                        dot_col(row, &wts.offset_w, mh * kp * 2, (m * kp + k) * 2 + 1) + wts.offset_b[(m * kp + k) * 2 + 1];
                    let lx = ref_x + ox / vw as f64;
                    let ly = ref_y + oy / vh as f64;
                    for t in 0..dh {
                        let ch = m * dh + t;
                        sampled[ch] += a[k] * sample_scalar(&vp, vh, vw, di, ch, lx * vw as f64 - 0.5, ly * vh as f64 - 0.5);
                    }
                }
            }
            for j in 0..dq {
                out[q * dq + j] = dot_col(&sampled, &wts.out_w, dq, j) + wts.out_b[j];
            }
        }
    }
    Tensor::new(vec![query.num_tokens(), dq], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_values() {
        assert!((erf_series(1.0) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((erf_series(-0.5) + 0.520_499_877_813_046_5).abs() < 1e-15);
        assert!((erf_series(2.5) - 0.999_593_047_982_555).abs() < 1e-14);
    }
}
