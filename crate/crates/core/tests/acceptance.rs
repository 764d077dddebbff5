//! Acceptance criteria, one printed PASS/FAIL line each. Runs as a plain
//! binary (`harness = false`) so the lines always reach the terminal.
//!
//! `cargo test -p piip-core --test acceptance`

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use piip::explorer::{sweep, Cell, ResolutionRange, SweepSpec, Table};
use piip::harness::dataset::{make_dataset, SyntheticTask};
use piip::harness::gradcheck::{self, perturb_for_gradcheck, random_probe, CoordStatus, KINK_SIDE_TOL};
use piip::harness::spectral::spectral_profile;
use piip::harness::train::{train_toy, TrainOptions};
use piip::harness::{deform_oracle_max_diff, kernel_oracle_diffs};
use piip::{cost_report, pareto_front, preset, Initializer, PiipModel, Tensor, PRESETS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20240601;

struct Line {
    id: &'static str,
    name: &'static str,
    gating: bool,
    passed: bool,
    detail: String,
}

fn rel(actual: f64, target: f64) -> f64 {
    (actual - target) / target
}

/// `name actual (target, +x.x%)` and whether it is within `tol`.
fn near(name: &str, actual: f64, target: f64, tol: f64) -> (bool, String) {
    let r = rel(actual, target);
    (r.abs() <= tol, format!("{name} {actual:.3} vs {target} ({:+.1}%, tol {:.0}%)", r * 100.0, tol * 100.0))
}

fn timed<T>(limit: Duration, f: impl FnOnce() -> (bool, String, T)) -> (bool, String, T) {
    let start = Instant::now();
    let (ok, detail, out) = f();
    let t = start.elapsed();
    let in_time = t <= limit;
    let timing = format!("{:.2}s of {:.0}s", t.as_secs_f64(), limit.as_secs_f64());
    (ok && in_time, format!("{detail}; {timing}{}", if in_time { "" } else { " EXCEEDED" }), out)
}

fn cost_reproduction() -> (bool, String, ()) {
    let r = cost_report(&preset("piip-b").unwrap());
    let m = |n: &str| r.get(n).unwrap().params as f64 / 1e6;
    let g = |n: &str| r.get(n).unwrap().flops as f64 / 1e9;
    let checks = [
        near("branch1 M", m("branch1"), 59.6, 0.03),
        near("branch2 M", m("branch2"), 15.1, 0.03),
        near("branch3 M", m("branch3"), 4.0, 0.03),
        near("branch1 G", g("branch1"), 3.8, 0.05),
        near("branch2 G", g("branch2"), 4.3, 0.05),
        near("branch3 G", g("branch3"), 4.9, 0.05),
        near("interactions M", m("interactions"), 21.2, 0.30),
        near("interactions G", g("interactions"), 5.1, 0.30),
        near("merging M", m("merging"), 0.3, 0.50),
        near("merging G", g("merging"), 0.2, 0.50),
    ];
    let ok = checks.iter().all(|c| c.0);
    let detail: Vec<String> = checks.into_iter().map(|c| c.1).collect();
    (ok, detail.join(", "), ())
}

fn baseline_reproduction() -> (bool, String, ()) {
    let r = cost_report(&preset("vit-b-baseline").unwrap());
    let p = near("params M", r.total_params() as f64 / 1e6, 86.0, 0.03);
    let f = near("FLOPs G", r.total_flops() as f64 / 1e9, 17.5, 0.05);
    (p.0 && f.0, format!("{}, {}", p.1, f.1), ())
}

fn random_image(rng: &mut ChaCha8Rng, r: usize) -> Tensor {
    Tensor::new(vec![r, r, 3], (0..r * r * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn zero_gate_identity() -> (bool, String, ()) {
    let model = PiipModel::new(&preset("piip-tiny-test").unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut equal = 0;
    for _ in 0..10 {
        let img = random_image(&mut rng, model.input_resolution());
        let with = model.forward_trace(&img).unwrap().branch_features;
        let without = model.forward_without_interactions(&img).unwrap().branch_features;
        let bitwise = with.len() == without.len()
            && with.iter().zip(&without).all(|(a, b)| {
                a.data().len() == b.data().len() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            });
        equal += usize::from(bitwise);
    }
    (equal == 10, format!("{equal}/10 inputs bitwise equal"), ())
}

fn deform_oracle() -> (bool, String, ()) {
    let d = deform_oracle_max_diff(50, SEED).unwrap();
    (d <= 1e-10, format!("50 instances (random, zero-offset, K=1, out-of-bounds), max abs diff {d:.2e} (tol 1e-10)"), ())
}

fn gradient_check() -> (bool, String, ()) {
    let mut model = PiipModel::new(&preset("piip-tiny-test").unwrap()).unwrap();
    perturb_for_gradcheck(&mut model, SEED);
    let (img, loss) = random_probe(&model, SEED);
    let report = gradcheck::gradient_check(&mut model, &img, &loss, 200, SEED).unwrap();
    let required = ["qkv", "fc", "offset", "attn_weight", "gamma", "tau", "ffn", "proj", "merge_w", "head"];
    let covered: BTreeSet<&str> = report.families().into_iter().collect();
    let missing: Vec<&str> = required.iter().copied().filter(|f| !covered.contains(f)).collect();
    let checked = report.count(CoordStatus::Checked);
    let kinks = report.count(CoordStatus::Kink);
    // Kinks only come from bilinear sampling crossing a grid line; a handful at most.
    let ok = checked == 200 && missing.is_empty() && report.max_rel_error <= 1e-4 && kinks <= 10 && report.passed();
    (
        ok,
        format!(
            "{checked} coords checked, families {covered:?}, missing {missing:?}, max rel error {:.2e} (tol 1e-4); \
             {kinks} kinked coords replaced (worst one-sided rel {:.2e}, tol {:.0e}), {} below floor",
            report.max_rel_error,
            report.max_kink_error,
            KINK_SIDE_TOL,
            report.count(CoordStatus::BelowFloor)
        ),
        (),
    )
}

fn self_consistency() -> (bool, String, ()) {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in PRESETS {
        let cfg = preset(name).unwrap();
        let registry = PiipModel::build(&cfg, Initializer::shape_only()).unwrap().num_params() as u64;
        let counted = cost_report(&cfg).total_params();
        ok &= registry == counted;
        parts.push(format!("{name} {registry}{}{counted}", if registry == counted { "==" } else { "!=" }));
    }
    (ok, parts.join(", "), ())
}

fn toy_training() -> (bool, String, Option<PiipModel>) {
    let cfg = preset("piip-tiny-test").unwrap();
    let data = make_dataset(&SyntheticTask::new(cfg.largest_resolution()), 512, 1).unwrap();
    let opts = TrainOptions::default();
    let (model, metrics) = train_toy(&cfg, &data, &opts).unwrap();
    let ok = metrics.final_train_acc >= 0.9 && metrics.loss_monotone();
    let first = metrics.rows.first().map_or(f64::NAN, |r| r.loss);
    let last = metrics.rows.last().map_or(f64::NAN, |r| r.loss);
    (
        ok,
        format!(
            "{} steps, batch {}, train acc {:.4} (min 0.9), window loss {first:.3} -> {last:.3}, monotone {}",
            opts.steps,
            opts.batch_size,
            metrics.final_train_acc,
            metrics.loss_monotone()
        ),
        Some(model),
    )
}

/// Plain O(n^2) filter: keep points no other point dominates.
fn dominance_oracle(points: &[(f64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            !points.iter().any(|&(c, q)| {
                let (ci, qi) = points[i];
                c <= ci && q >= qi && (c < ci || q > qi)
            })
        })
        .collect()
}

fn as_f64(c: &Cell) -> f64 {
    match c {
        Cell::Int(i) => *i as f64,
        Cell::Float(f) => *f,
        _ => panic!("numeric cell expected"),
    }
}

/// Every pair of rows differing in exactly one resolution has strictly
/// larger FLOPs at the larger resolution.
fn sweep_monotone(table: &Table, branches: usize) -> (usize, usize) {
    let res_cols: Vec<usize> = (1..=branches).map(|j| table.column(&format!("res{j}")).unwrap()).collect();
    let flops = table.column("flops").unwrap();
    let (mut pairs, mut bad) = (0, 0);
    for a in &table.rows {
        for b in &table.rows {
            let diff: Vec<usize> = res_cols.iter().copied().filter(|&c| a[c] != b[c]).collect();
            if diff.len() == 1 && as_f64(&a[diff[0]]) < as_f64(&b[diff[0]]) {
                pairs += 1;
                bad += usize::from(as_f64(&a[flops]) >= as_f64(&b[flops]));
            }
        }
    }
    (pairs, bad)
}

fn explorer_correctness() -> (bool, String, ()) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut mismatches = 0;
    for t in 0..100 {
        let n = rng.gen_range(0..40);
        let coarse = t % 2 == 0;
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                if coarse {
                    (rng.gen_range(0..6) as f64, rng.gen_range(0..6) as f64)
                } else {
                    (rng.gen_range(0.0..1e9), rng.gen_range(0.0..1.0))
                }
            })
            .collect();
        let table = Table {
            columns: vec!["id".into(), "flops".into(), "acc".into()],
            rows: pts.iter().enumerate().map(|(i, p)| vec![Cell::Int(i as i64), Cell::Float(p.0), Cell::Float(p.1)]).collect(),
        };
        let front = pareto_front(&table, "flops", "acc").unwrap();
        let got: BTreeSet<usize> = front.rows.iter().map(|r| as_f64(&r[0]) as usize).collect();
        let want: BTreeSet<usize> = dominance_oracle(&pts).into_iter().collect();
        mismatches += usize::from(got != want || got.len() != front.rows.len());
    }

    let mut grids = Vec::new();
    let mut tiny = SweepSpec::fixed(preset("piip-tiny-test").unwrap());
    tiny.ranges = vec![
        ResolutionRange { from: 8, to: 24, step: 4 },
        ResolutionRange { from: 24, to: 40, step: 4 },
        ResolutionRange { from: 40, to: 72, step: 8 },
    ];
    grids.push(("piip-tiny-test", tiny));
    let mut tsb = SweepSpec::fixed(preset("piip-tsb-toy").unwrap());
    tsb.ranges = vec![
        ResolutionRange { from: 40, to: 72, step: 8 },
        ResolutionRange { from: 72, to: 136, step: 16 },
        ResolutionRange { from: 120, to: 184, step: 16 },
    ];
    grids.push(("piip-tsb-toy", tsb));
    let mut mono = Vec::new();
    let mut mono_ok = true;
    for (name, spec) in &grids {
        let table = sweep(spec).unwrap();
        let (pairs, bad) = sweep_monotone(&table, 3);
        mono_ok &= bad == 0 && pairs > 0;
        mono.push(format!("{name}: {} rows, {bad}/{pairs} pairs non-monotone", table.rows.len()));
    }
    (
        mismatches == 0 && mono_ok,
        format!("pareto mismatches {mismatches}/100 tables; sweep {}", mono.join("; ")),
        (),
    )
}

fn kernel_oracles() -> (bool, String, ()) {
    let diffs = kernel_oracle_diffs(100, SEED).unwrap();
    let worst = diffs.iter().cloned().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let ok = diffs.iter().all(|d| d.1 <= 1e-9);
    (ok, format!("{} kernels x 100 cases, worst {} {:.2e} (tol 1e-9)", diffs.len(), worst.0, worst.1), ())
}

/// Mean high-frequency fraction of branches 1 (lowest resolution) and M
/// (highest) over a held-out set.
fn spectral(model: &PiipModel) -> (bool, String) {
    let task = SyntheticTask::new(model.input_resolution());
    let test = make_dataset(&task, 100, 2).unwrap();
    let (mut low, mut high) = (0.0, 0.0);
    for (img, _) in &test.samples {
        let f = model.forward_trace(img).unwrap().branch_features;
        low += spectral_profile(&f[0]).unwrap().high_fraction;
        high += spectral_profile(f.last().unwrap()).unwrap().high_fraction;
    }
    let n = test.len() as f64;
    let (low, high) = (low / n, high / n);
    (high > low, format!("high-frequency fraction: highest-resolution branch {high:.4}, lowest-resolution branch {low:.4}"))
}

fn main() {
    // libtest flags (--nocapture, filters) are accepted and ignored.
    let mut lines = Vec::new();
    let mut push = |id, name, gating, (passed, detail, _): (bool, String, ())| {
        let l = Line { id, name, gating, passed, detail };
        println!("{}", render(&l));
        lines.push(l);
    };
    push("1", "cost reproduction (piip-b)", true, timed(Duration::from_secs(1), cost_reproduction));
    push("2", "baseline reproduction (ViT-B @224)", true, timed(Duration::from_secs(1), baseline_reproduction));
    push("3", "zero-gate identity", true, timed(Duration::from_secs(30), zero_gate_identity));
    push("4", "deformable attention oracle", true, timed(Duration::from_secs(60), deform_oracle));
    push("5", "finite-difference gradients", true, timed(Duration::from_secs(300), gradient_check));
    push("6", "registry self-consistency", true, self_consistency());
    let (ok7, detail7, model) = timed(Duration::from_secs(600), toy_training);
    push("7", "toy trainability", true, (ok7, detail7, ()));
    push("8", "explorer correctness", true, timed(Duration::from_secs(30), explorer_correctness));
    push("9", "kernel oracles", true, timed(Duration::from_secs(120), kernel_oracles));
    let soft = match model {
        Some(m) => spectral(&m),
        None => (false, "no trained model".into()),
    };
    push("10", "spectral ordering (soft, non-gating)", false, (soft.0, soft.1, ()));

    let failed: Vec<&str> = lines.iter().filter(|l| l.gating && !l.passed).map(|l| l.id).collect();
    println!(
        "acceptance: {}/{} gating criteria passed",
        lines.iter().filter(|l| l.gating && l.passed).count(),
        lines.iter().filter(|l| l.gating).count()
    );
    if !failed.is_empty() {
        eprintln!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}

fn render(l: &Line) -> String {
    let tag = match (l.passed, l.gating) {
        (true, _) => "PASS",
        (false, true) => "FAIL",
        (false, false) => "FAIL (soft)",
    };
    format!("[{tag}] criterion {} {}: {}", l.id, l.name, l.detail)
}
