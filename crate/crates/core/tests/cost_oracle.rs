//! Cost model against hand-derived counts.

use piip::{cost_delta, cost_report, preset, AttentionMode, PRESETS};
use proptest::prelude::*;

/// piip-tiny-test worked out layer by layer (multiply-accumulates).
///
/// Branch j: N tokens of width D, MLP hidden h, two blocks, patch 4 on RGB.
///   patchify  N * D * 48
///   per block 4 N D^2 (qkv + proj) + 2 N T D (scores + mix, T = keys seen) + 2 N D h (MLP)
/// Interactions (two points, four directions each; src -> dst queries dst):
///   FC Nv Ds Dq, value Nv Dq Dq, out Nq Dq Dq, offset+weight heads 3 Nq Dq M K,
///   sampling 4 * 2 * Nq K Dq (four taps, two flops-per-tap in weight + mix), FFN 2 Nq Dq h.
/// Merging: linear projections into width 32, bilinear upsampling of the two
///   coarser maps (4 taps each) and the three-way weighted sum on 16 x 16 x 32.
#[test]
fn tiny_flops_spreadsheet() {
    let b1 = 16 * 32 * 48 + 2 * (4 * 16 * 32 * 32 + 2 * 16 * 16 * 32 + 2 * 16 * 32 * 128);
    let b2 = 64 * 16 * 48 + 2 * (4 * 64 * 16 * 16 + 2 * 64 * 64 * 16 + 2 * 64 * 16 * 64);
    // 16 x 16 grid in 8 x 8 windows: every token sees 64 keys.
    let b3 = 256 * 8 * 48 + 2 * (4 * 256 * 8 * 8 + 2 * 256 * 64 * 8 + 2 * 256 * 8 * 32);
    assert_eq!((b1, b2, b3), (450_560, 704_512, 1_015_808));

    let dir = |nq: u64, dq: u64, heads: u64, nv: u64, ds: u64| {
        let (k, h) = (4, dq / 4);
        nv * ds * dq + nv * dq * dq + nq * dq * dq + 3 * nq * dq * heads * k + 8 * nq * k * dq + 2 * nq * dq * h
    };
    let one_point = dir(64, 16, 2, 16, 32) // 1 -> 2
        + dir(16, 32, 4, 64, 16) // 2 -> 1
        + dir(256, 8, 1, 64, 16) // 2 -> 3
        + dir(64, 16, 2, 256, 8); // 3 -> 2
    assert_eq!(one_point, 94_208 + 163_840 + 126_976 + 180_224);
    let interactions = 2 * one_point;

    let merging = 64 * 16 * 32 + 256 * 8 * 32 + 2 * 4 * 256 * 32 + 3 * 256 * 32;
    let head = 32 * 10;

    let r = cost_report(&preset("piip-tiny-test").unwrap());
    let f = |n: &str| r.get(n).unwrap().flops;
    assert_eq!(f("branch1"), b1);
    assert_eq!(f("branch2"), b2);
    assert_eq!(f("branch3"), b3);
    assert_eq!(f("interactions"), interactions);
    assert_eq!(f("merging"), merging);
    assert_eq!(f("head"), head);
    assert_eq!(r.total_flops(), 3_490_112);
}

/// Parameters of piip-tiny-test from the layer shapes.
#[test]
fn tiny_params_spreadsheet() {
    let lin = |i: u64, o: u64| i * o + o;
    let ln = |d: u64| 2 * d;
    let branch = |d: u64, grid: u64| {
        let embed = lin(48, d) + grid * grid * d;
        let block = ln(d) + lin(d, 3 * d) + lin(d, d) + ln(d) + lin(d, 4 * d) + lin(4 * d, d);
        // No closing norm: the merging projection normalizes.
        embed + 2 * block
    };
    assert_eq!(branch(32, 4), 27_488);
    let dir = |dq: u64, ds: u64, heads: u64| {
        let h = dq / 4;
        lin(ds, dq) + ln(dq) + ln(dq) // FC, query norm, value norm
            + lin(dq, dq) + lin(dq, dq) // value and output projections
            + lin(dq, heads * 4 * 2) + lin(dq, heads * 4) // offset and weight heads
            + ln(dq) + lin(dq, h) + lin(h, dq) // FFN with its norm
            + 2 * dq // per-channel gamma and tau
    };
    let interactions = 2 * (dir(16, 32, 2) + dir(32, 16, 4) + dir(8, 16, 1) + dir(16, 8, 2));
    let merging = lin(16, 32) + 2 * 32 + lin(8, 32) + 2 * 32 + 3;
    let head = ln(32) + lin(32, 10);

    let r = cost_report(&preset("piip-tiny-test").unwrap());
    let p = |n: &str| r.get(n).unwrap().params;
    assert_eq!(p("branch1"), branch(32, 4));
    assert_eq!(p("branch2"), branch(16, 8));
    assert_eq!(p("branch3"), branch(8, 16));
    assert_eq!(p("interactions"), interactions);
    assert_eq!(p("merging"), merging);
    assert_eq!(p("head"), head);
}

#[test]
fn doubling_a_resolution_scales_linear_and_quadratic_terms() {
    // piip-tsb-toy branch 3: width 24, 140 px, patch 4, depth 4, global.
    let cfg = preset("piip-tsb-toy").unwrap();
    let (d, depth) = (24u64, 4u64);
    let split = |n: u64| {
        let linear = n * d * 48 + depth * (4 * n * d * d + 2 * n * d * 4 * d);
        let quadratic = depth * 2 * n * n * d;
        (linear, quadratic)
    };
    let (l, q) = split(35 * 35);
    assert_eq!(cost_report(&cfg).get("branch3").unwrap().flops, l + q);
    let doubled = cfg.clone().with_resolution(3, 280);
    let delta = cost_delta(&cfg, &doubled);
    let e = delta.entries.iter().find(|e| e.name == "branch3").unwrap();
    assert_eq!(e.flops as u64, 4 * l + 16 * q - (l + q));
    assert_eq!(e.params, 24 * (70 * 70 - 35 * 35), "only the position grid grows");
}

#[test]
fn deltas_are_antisymmetric_and_zero_on_identity() {
    for a in PRESETS {
        let ca = preset(a).unwrap();
        let zero = cost_delta(&ca, &ca);
        assert!(zero.entries.iter().chain([&zero.total]).all(|e| e.params == 0 && e.flops == 0));
        for b in PRESETS {
            let cb = preset(b).unwrap();
            let (ab, ba) = (cost_delta(&ca, &cb), cost_delta(&cb, &ca));
            assert_eq!(ab.total.params, -ba.total.params);
            assert_eq!(ab.total.flops, -ba.total.flops);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn branch_flops_grow_with_resolution(branch in 1usize..=3, steps in 1usize..6, windowed in any::<bool>()) {
        let mut cfg = preset("piip-tsb-toy").unwrap();
        if windowed {
            cfg.branches[branch - 1].attention = AttentionMode::Windowed(16);
        }
        let base = cfg.branches[branch - 1].resolution;
        let bigger = cfg.clone().with_resolution(branch, base + 4 * steps);
        let name = format!("branch{branch}");
        let (a, b) = (cost_report(&cfg), cost_report(&bigger));
        prop_assert!(b.get(&name).unwrap().flops > a.get(&name).unwrap().flops);
        prop_assert!(b.total_flops() > a.total_flops());
    }
}
