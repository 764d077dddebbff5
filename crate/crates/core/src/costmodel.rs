//! Closed-form parameter and FLOP counts.
//!
//! FLOPs follow the multiply-accumulate convention: one MAC counts as one
//! FLOP. Normalization, activation, softmax, pooling and position-embedding
//! resize terms are excluded; they are all well below one percent of a block.
//!
//! Parameter counts are exact: they equal the number of scalars the model
//! registers for the same config.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::{Arch, AttentionImpl, AttentionMode, BranchSpec, MergeMode, ProjKind, PyramidConfig};
use crate::branches::CONV_KERNEL;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

/// Per-component costs: `branch1..branchM`, `interactions`, `merging` and,
/// when the config has a classifier, `head`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn get(&self, name: &str) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Fixed-width table of raw counts plus millions of parameters and GFLOPs.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>14} {:>10} {:>16} {:>10}",
            "component", "params", "(M)", "FLOPs", "(G)"
        );
        let row = |s: &mut String, name: &str, p: u64, f: u64| {
            let _ = writeln!(s, "{:<14} {:>14} {:>10.3} {:>16} {:>10.3}", name, p, p as f64 / 1e6, f, f as f64 / 1e9);
        };
        for e in &self.entries {
            row(&mut s, &e.name, e.params, e.flops);
        }
        row(&mut s, "total", self.total_params(), self.total_flops());
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "entries": self.entries,
            "total": { "params": self.total_params(), "flops": self.total_flops() },
            "flops_convention": "multiply-accumulate",
        })
    }
}

fn linear(fan_in: usize, fan_out: usize) -> u64 {
    (fan_in * fan_out + fan_out) as u64
}

fn norm(dim: usize) -> u64 {
    2 * dim as u64
}

fn branch_params(b: &BranchSpec) -> u64 {
    let d = b.dim;
    let h = b.mlp_hidden();
    let p = b.patch_size;
    let embed = (p * p * 3 * d + d) as u64;
    match b.arch {
        Arch::Transformer => {
            let pos = (b.grid() * b.grid() * d) as u64;
            let block = norm(d) + linear(d, 3 * d) + linear(d, d) + norm(d) + linear(d, h) + linear(h, d);
            embed + pos + b.depth as u64 * block
        }
        Arch::Convnet => {
            let block = (CONV_KERNEL * CONV_KERNEL * d + d) as u64 + norm(d) + linear(d, h) + linear(h, d) + d as u64;
            embed + norm(d) + b.depth as u64 * block
        }
    }
}

fn branch_flops(b: &BranchSpec) -> u64 {
    let (n, d, h) = (b.tokens() as u64, b.dim as u64, b.mlp_hidden() as u64);
    let p = b.patch_size as u64;
    let patchify = n * d * 3 * p * p;
    let block = match b.arch {
        Arch::Transformer => {
            let mixing = match b.attention {
                AttentionMode::Global => 2 * n * n * d,
                AttentionMode::Windowed(t) => 2 * n * (t as u64).min(n) * d,
            };
            4 * n * d * d + mixing + 2 * n * d * h
        }
        Arch::Convnet => (CONV_KERNEL * CONV_KERNEL) as u64 * n * d + 2 * n * d * h,
    };
    patchify + b.depth as u64 * block
}

/// Params and FLOPs of one interaction direction `src -> dst`.
fn direction_cost(cfg: &PyramidConfig, src: usize, dst: usize) -> (u64, u64) {
    let it = &cfg.interactions;
    let (q, v) = (cfg.branch(dst), cfg.branch(src));
    let (dq, ds) = (q.dim, v.dim);
    let (nq, nv) = (q.tokens() as u64, v.tokens() as u64);
    let hidden = it.ffn_hidden(dq);
    let mut params = linear(ds, dq) + 3 * norm(dq) + linear(dq, hidden) + linear(hidden, dq) + 2 * dq as u64;
    let (dq64, ds64, h64) = (dq as u64, ds as u64, hidden as u64);
    let mut flops = nv * ds64 * dq64 + 2 * nq * dq64 * h64;
    match it.attention_impl {
        AttentionImpl::Deformable => {
            let di = it.inner_dim(dq);
            let mk = it.heads_for(dq) * it.deform_points;
            params += linear(dq, di) + linear(di, dq) + linear(dq, 2 * mk) + linear(dq, mk);
            let (di, mk) = (di as u64, mk as u64);
            flops += nv * dq64 * di + nq * di * dq64 + 3 * nq * dq64 * mk + 8 * nq * it.deform_points as u64 * di;
        }
        AttentionImpl::Regular => {
            params += 4 * linear(dq, dq);
            flops += 2 * nq * dq64 * dq64 + 2 * nv * dq64 * dq64 + 2 * nq * nv * dq64;
        }
    }
    (params, flops)
}

fn interaction_cost(cfg: &PyramidConfig) -> (u64, u64) {
    let per_point = cfg
        .interactions
        .directions
        .iter()
        .map(|d| direction_cost(cfg, d.src, d.dst))
        .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let c = cfg.interactions.count as u64;
    (c * per_point.0, c * per_point.1)
}

fn merge_cost(cfg: &PyramidConfig) -> (u64, u64) {
    if cfg.merge.mode == MergeMode::Classification {
        return (0, 0);
    }
    let d1 = cfg.branches[0].dim;
    let target = cfg.branches.iter().map(|b| b.grid()).max().unwrap_or(0);
    let nm = (target * target) as u64;
    let mut params = cfg.branches.len() as u64;
    let mut flops = 0u64;
    for b in &cfg.branches[1..] {
        let nj = b.tokens() as u64;
        match cfg.merge.proj {
            ProjKind::Linear => {
                params += linear(b.dim, d1) + norm(d1);
                flops += nj * (b.dim * d1) as u64;
            }
            ProjKind::Conv => {
                params += (9 * b.dim * d1 + d1) as u64 + norm(d1) + (9 * d1 * d1 + d1) as u64;
                flops += nj * 9 * (b.dim * d1) as u64 + nj * 9 * (d1 * d1) as u64;
            }
        }
    }
    for b in &cfg.branches {
        if b.grid() != target {
            flops += 4 * nm * d1 as u64;
        }
        flops += nm * d1 as u64;
    }
    (params, flops)
}

fn head_cost(cfg: &PyramidConfig) -> Option<(u64, u64)> {
    let c = cfg.merge.classes;
    if c == 0 {
        return None;
    }
    let dims: Vec<usize> = match cfg.merge.mode {
        MergeMode::Dense => vec![cfg.branches[0].dim],
        MergeMode::Classification => cfg.branches.iter().map(|b| b.dim).collect(),
    };
    Some(dims.iter().fold((0, 0), |(p, f), &d| (p + norm(d) + linear(d, c), f + (d * c) as u64)))
}

/// Parameters and FLOPs per component.
pub fn cost_report(cfg: &PyramidConfig) -> CostReport {
    let mut entries: Vec<CostEntry> = cfg
        .branches
        .iter()
        .enumerate()
        .map(|(j, b)| CostEntry { name: format!("branch{}", j + 1), params: branch_params(b), flops: branch_flops(b) })
        .collect();
    let (p, f) = interaction_cost(cfg);
    entries.push(CostEntry { name: "interactions".into(), params: p, flops: f });
    let (p, f) = merge_cost(cfg);
    entries.push(CostEntry { name: "merging".into(), params: p, flops: f });
    if let Some((p, f)) = head_cost(cfg) {
        entries.push(CostEntry { name: "head".into(), params: p, flops: f });
    }
    CostReport { entries }
}

/// Same report as [`cost_report`]; read the `params` columns.
pub fn count_params(cfg: &PyramidConfig) -> CostReport {
    cost_report(cfg)
}

/// Same report as [`cost_report`]; read the `flops` columns.
pub fn count_flops(cfg: &PyramidConfig) -> CostReport {
    cost_report(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaEntry {
    pub name: String,
    pub params: i64,
    pub flops: i64,
    /// Relative to the first config; `None` when its value is zero.
    pub params_pct: Option<f64>,
    pub flops_pct: Option<f64>,
}

/// Signed change from config `a` to config `b`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostDelta {
    pub entries: Vec<DeltaEntry>,
    pub total: DeltaEntry,
}

fn delta_entry(name: &str, a: (u64, u64), b: (u64, u64)) -> DeltaEntry {
    let pct = |x: u64, y: u64| (x != 0).then(|| (y as f64 - x as f64) / x as f64 * 100.0);
    DeltaEntry {
        name: name.to_string(),
        params: b.0 as i64 - a.0 as i64,
        flops: b.1 as i64 - a.1 as i64,
        params_pct: pct(a.0, b.0),
        flops_pct: pct(a.1, b.1),
    }
}

pub fn cost_delta(a: &PyramidConfig, b: &PyramidConfig) -> CostDelta {
    let (ra, rb) = (cost_report(a), cost_report(b));
    let mut names: Vec<&str> = ra.entries.iter().map(|e| e.name.as_str()).collect();
    for e in &rb.entries {
        if !names.contains(&e.name.as_str()) {
            names.push(&e.name);
        }
    }
    let lookup = |r: &CostReport, n: &str| r.get(n).map(|e| (e.params, e.flops)).unwrap_or((0, 0));
    let entries = names.iter().map(|n| delta_entry(n, lookup(&ra, n), lookup(&rb, n))).collect();
    let total = delta_entry(
        "total",
        (ra.total_params(), ra.total_flops()),
        (rb.total_params(), rb.total_flops()),
    );
    CostDelta { entries, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, PRESETS};
    use crate::model::PiipModel;
    use crate::params::Initializer;

    #[test]
    fn registry_matches_for_small_presets() {
        for name in ["piip-tiny-test", "piip-tsb-toy", "piip-sbl-toy"] {
            let cfg = preset(name).unwrap();
            let model = PiipModel::build(&cfg, Initializer::shape_only()).unwrap();
            assert_eq!(model.num_params() as u64, cost_report(&cfg).total_params(), "{name}");
        }
    }

    #[test]
    fn totals_are_entry_sums() {
        for name in PRESETS {
            let r = cost_report(&preset(name).unwrap());
            assert_eq!(r.total_params(), r.entries.iter().map(|e| e.params).sum::<u64>());
            assert_eq!(r.total_flops(), r.entries.iter().map(|e| e.flops).sum::<u64>());
        }
    }

    #[test]
    fn delta_identity_and_antisymmetry() {
        let a = preset("piip-b").unwrap();
        let d = cost_delta(&a, &a);
        assert!(d.entries.iter().all(|e| e.params == 0 && e.flops == 0));
        let b = a.clone().with_resolution(3, 640);
        let ab = cost_delta(&a, &b);
        let ba = cost_delta(&b, &a);
        for (x, y) in ab.entries.iter().zip(&ba.entries) {
            assert_eq!((x.params, x.flops), (-y.params, -y.flops));
        }
        assert!(ab.total.flops > 0);
    }

    #[test]
    fn windowed_never_exceeds_global() {
        let mut b = BranchSpec::transformer(64, 4, 128, 8, 2);
        let global = branch_flops(&b);
        b.attention = AttentionMode::Windowed(64);
        assert!(branch_flops(&b) < global);
        b.attention = AttentionMode::Windowed(256);
        assert_eq!(branch_flops(&b), global);
    }
}
