//! Verification machinery: scalar oracles, finite-difference gradient checks,
//! the synthetic glyph task, toy training and spectral analysis.

pub mod dataset;
pub mod gradcheck;
pub mod oracle;
pub mod spectral;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{preset, PRESETS};
use crate::costmodel::cost_report;
use crate::error::Result;
use crate::explorer::{dominates, pareto_front, Cell, Table};
use crate::interaction::{deform_attn, DeformableCrossAttention};
use crate::model::PiipModel;
use crate::params::{Initializer, ParamStore};
use crate::primitives;
use crate::tensor::{FeatureMap, Tensor};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name: name.to_string(), passed, detail }
}

/// Geometry variants exercised by the deformable-attention oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeformCase {
    Random,
    ZeroOffsets,
    SinglePoint,
    OutOfBounds,
}

pub fn random_map(rng: &mut ChaCha8Rng, gh: usize, gw: usize, dim: usize, id: usize) -> FeatureMap {
    let data = (0..gh * gw * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeatureMap::new(gh, gw, dim, id, data).expect("sizes agree")
}

/// A random deformable-attention instance: weights, query map, value map.
pub fn random_deform_instance(
    rng: &mut ChaCha8Rng,
    case: DeformCase,
) -> (ParamStore, DeformableCrossAttention, FeatureMap, FeatureMap) {
    let heads = rng.gen_range(1..=3);
    let dim = heads * rng.gen_range(1..=4);
    let points = if case == DeformCase::SinglePoint { 1 } else { rng.gen_range(1..=4) };
    let mut store = ParamStore::new();
    let attn = DeformableCrossAttention::new(&mut store, &mut Initializer::seeded(rng.gen()), "a", dim, dim, heads, points);
    let offset_scale = match case {
        DeformCase::OutOfBounds => 6.0,
        _ => 1.5,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let is_offset = id == attn.offset_head.weight || id == attn.offset_head.bias;
        for v in store.get_mut(id).data_mut() {
            *v = match (case, is_offset) {
                (DeformCase::ZeroOffsets, true) => 0.0,
                (_, true) => rng.gen_range(-offset_scale..offset_scale),
                _ => rng.gen_range(-0.8..0.8),
            };
        }
    }
    let (qh, qw) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
    let (vh, vw) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
    let q = random_map(rng, qh, qw, dim, 1);
    let v = random_map(rng, vh, vw, dim, 2);
    (store, attn, q, v)
}

/// Max-abs difference between `deform_attn` and the scalar oracle over `n`
/// instances cycling through every [`DeformCase`].
pub fn deform_oracle_max_diff(n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = [DeformCase::Random, DeformCase::ZeroOffsets, DeformCase::SinglePoint, DeformCase::OutOfBounds];
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let (store, attn, q, v) = random_deform_instance(&mut rng, cases[i % cases.len()]);
        let main = deform_attn(&store, &attn, &q, &v)?;
        let reference = oracle::brute_force_deform_attn(&q, &v, &attn.dump(&store));
        worst = worst.max(main.max_abs_diff(&reference));
    }
    Ok(worst)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sizes agree")
}

/// Max-abs difference of every public kernel against its scalar oracle over
/// `cases` random instances each; returns `(kernel, worst)` pairs.
pub fn kernel_oracle_diffs(cases: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 9];
    for _ in 0..cases {
        let (n, k, m) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let x = rand_tensor(&mut rng, vec![n, k]);
        let w = rand_tensor(&mut rng, vec![k, m]);
        let b = rand_tensor(&mut rng, vec![m]);
        worst[0] = worst[0].max(primitives::linear(&x, &w, Some(&b))?.max_abs_diff(&oracle::linear(&x, &w, Some(&b))));

        let gain = rand_tensor(&mut rng, vec![k]);
        let shift = rand_tensor(&mut rng, vec![k]);
        let ln = primitives::layer_norm(&x, &gain, &shift, primitives::LN_EPS)?;
        worst[1] = worst[1].max(ln.max_abs_diff(&oracle::layer_norm(&x, gain.data(), shift.data(), primitives::LN_EPS)));

        let groups = rng.gen_range(1..4);
        let c = groups * rng.gen_range(1..4);
        let (gh, gw) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let fm = random_map(&mut rng, gh, gw, c, 1);
        let ga = rand_tensor(&mut rng, vec![c]);
        let sh = rand_tensor(&mut rng, vec![c]);
        let gn = primitives::group_norm(&fm, groups, &ga, &sh, primitives::GN_EPS)?;
        let gn_ref = oracle::group_norm(&fm, groups, ga.data(), sh.data(), primitives::GN_EPS);
        worst[2] = worst[2].max(gn.tokens().max_abs_diff(gn_ref.tokens()));

        let v: Vec<f64> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let d = primitives::softmax(&v).iter().zip(oracle::softmax(&v)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let xg = rng.gen_range(-4.0..4.0);
        worst[3] = worst[3].max(d).max((primitives::gelu(xg) - oracle::gelu(xg)).abs());

        let img = rand_tensor(&mut rng, vec![gh, gw, c]);
        let (oh, ow) = (rng.gen_range(1..9), rng.gen_range(1..9));
        worst[4] = worst[4].max(primitives::bilinear_resize(&img, oh, ow)?.max_abs_diff(&oracle::bilinear_resize(&img, oh, ow)));

        let pts: Vec<(f64, f64)> = (0..5).map(|_| (rng.gen_range(-0.3..1.3), rng.gen_range(-0.3..1.3))).collect();
        worst[5] = worst[5].max(primitives::bilinear_sample(&img, &pts)?.max_abs_diff(&oracle::bilinear_sample(&img, &pts)));

        let (kh, stride) = (rng.gen_range(1..4), rng.gen_range(1..3));
        let pad = rng.gen_range(0..2);
        if gh + 2 * pad >= kh && gw + 2 * pad >= kh {
            let cout = rng.gen_range(1..4);
            let ker = rand_tensor(&mut rng, vec![kh, kh, c, cout]);
            let cb = rand_tensor(&mut rng, vec![cout]);
            let a = primitives::conv2d(&fm, &ker, Some(&cb), stride, pad)?;
            let r = oracle::conv2d(&fm, &ker, Some(&cb), stride, pad);
            worst[6] = worst[6].max(a.tokens().max_abs_diff(r.tokens()));
            let dk = rand_tensor(&mut rng, vec![kh, kh, c]);
            let db = rand_tensor(&mut rng, vec![c]);
            let a = primitives::depthwise_conv(&fm, &dk, Some(&db), pad)?;
            let r = oracle::depthwise(&fm, &dk, Some(&db), pad);
            worst[7] = worst[7].max(a.tokens().max_abs_diff(r.tokens()));
        }

        let heads = rng.gen_range(1..3);
        let dd = heads * rng.gen_range(1..4);
        let side = rng.gen_range(1..3);
        let (ah, aw) = (side * rng.gen_range(1..3), side * rng.gen_range(1..3));
        let q = rand_tensor(&mut rng, vec![ah * aw, dd]);
        let kk = rand_tensor(&mut rng, vec![ah * aw, dd]);
        let vv = rand_tensor(&mut rng, vec![ah * aw, dd]);
        for win in [None, Some((ah, aw, side))] {
            let a = primitives::multi_head_attention(&q, &kk, &vv, heads, win)?;
            worst[8] = worst[8].max(a.max_abs_diff(&oracle::attention(&q, &kk, &vv, heads, win)));
        }
    }
    let names = ["linear", "layer_norm", "group_norm", "softmax/gelu", "resize", "sample", "conv2d", "depthwise", "attention"];
    Ok(names.into_iter().zip(worst).collect())
}

/// Exhaustive O(n^2) dominance filter, in input order.
pub fn pareto_oracle(points: &[(f64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| !points.iter().any(|p| dominates(p.0, p.1, points[i].0, points[i].1)))
        .collect()
}

/// Number of random tables (out of `n`) on which `pareto_front` disagrees
/// with [`pareto_oracle`] as a set.
pub fn pareto_mismatches(n: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..n {
        let rows = rng.gen_range(0..30);
        // Coarse values force ties on both axes.
        let pts: Vec<(f64, f64)> =
            (0..rows).map(|_| (rng.gen_range(0..8) as f64, rng.gen_range(0..8) as f64 / 4.0)).collect();
        let table = Table {
            columns: vec!["id".into(), "flops".into(), "acc".into()],
            rows: pts.iter().enumerate().map(|(i, p)| vec![Cell::Int(i as i64), Cell::Float(p.0), Cell::Float(p.1)]).collect(),
        };
        let front = pareto_front(&table, "flops", "acc")?;
        let mut got: Vec<usize> = front
            .rows
            .iter()
            .map(|r| match r[0] {
                Cell::Int(i) => i as usize,
                _ => usize::MAX,
            })
            .collect();
        got.sort();
        if got != pareto_oracle(&pts) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Runs the fast verification suites used by `piip verify`.
pub fn verify_all(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();

    match deform_oracle_max_diff(50, seed) {
        Ok(d) => out.push(check("deformable attention vs scalar oracle", d <= 1e-10, format!("max abs diff {d:.2e}"))),
        Err(e) => out.push(check("deformable attention vs scalar oracle", false, e.to_string())),
    }

    match kernel_oracle_diffs(100, seed) {
        Ok(diffs) => {
            for (name, d) in diffs {
                out.push(check(&format!("kernel {name} vs scalar oracle"), d <= 1e-9, format!("max abs diff {d:.2e}")));
            }
        }
        Err(e) => out.push(check("kernel oracles", false, e.to_string())),
    }

    let tiny = preset("piip-tiny-test").expect("built-in preset");
    let zero_gate = (|| -> Result<bool> {
        let model = PiipModel::new(&tiny)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = model.input_resolution();
        for _ in 0..10 {
            let img = rand_tensor(&mut rng, vec![r, r, 3]);
            if model.forward_trace(&img)?.branch_features != model.forward_without_interactions(&img)?.branch_features {
                return Ok(false);
            }
        }
        Ok(true)
    })();
    out.push(match zero_gate {
        Ok(ok) => check("zero-gate identity", ok, "10 random inputs, bitwise comparison".into()),
        Err(e) => check("zero-gate identity", false, e.to_string()),
    });

    let fd = (|| -> Result<gradcheck::GradCheckReport> {
        let mut model = PiipModel::new(&tiny)?;
        gradcheck::perturb_for_gradcheck(&mut model, seed);
        let (img, loss) = gradcheck::random_probe(&model, seed);
        gradcheck::gradient_check(&mut model, &img, &loss, 200, seed)
    })();
    out.push(match fd {
        Ok(r) => check(
            "finite-difference gradients",
            r.count(gradcheck::CoordStatus::Checked) >= 200 && r.passed(),
            format!(
                "{} coords checked over {} families, max rel error {:.2e}; {} kinked (worst one-sided {:.2e}), {} below floor",
                r.count(gradcheck::CoordStatus::Checked),
                r.families().len(),
                r.max_rel_error,
                r.count(gradcheck::CoordStatus::Kink),
                r.max_kink_error,
                r.count(gradcheck::CoordStatus::BelowFloor)
            ),
        ),
        Err(e) => check("finite-difference gradients", false, e.to_string()),
    });

    for name in PRESETS {
        let cfg = preset(name).expect("built-in preset");
        let res = PiipModel::build(&cfg, Initializer::shape_only());
        out.push(match res {
            Ok(m) => {
                let (a, b) = (m.num_params() as u64, cost_report(&cfg).total_params());
                check(&format!("registry size {name}"), a == b, format!("registry {a}, cost model {b}"))
            }
            Err(e) => check(&format!("registry size {name}"), false, e.to_string()),
        });
    }

    out.push(match pareto_mismatches(100, seed) {
        Ok(b) => check("pareto front vs dominance oracle", b == 0, format!("{b} of 100 tables differ")),
        Err(e) => check("pareto front vs dominance oracle", false, e.to_string()),
    });
    out
}
