//! Config text round trips and key-naming errors.

use piip::{
    parse_config, preset, AttentionImpl, AttentionMode, BranchSpec, Direction, Error, InteractionSchedule, MergeMode,
    MergeSpec, ProjKind, PyramidConfig, PRESETS,
};
use proptest::prelude::*;

fn arb_config() -> impl Strategy<Value = PyramidConfig> {
    (1usize..=3, 1usize..=4, 0..=i64::MAX as u64, 0usize..3, any::<bool>(), any::<bool>(), 0usize..20)
        .prop_flat_map(|(m, depth, seed, mode, regular, linear, classes)| {
            let branches = prop::collection::vec((1usize..=4, 1usize..=3, any::<bool>()), m);
            (Just((m, depth, seed, mode, regular, linear, classes)), branches, 0..=depth, 1usize..=8)
        })
        .prop_map(|((m, depth, seed, mode, regular, linear, classes), shapes, count, points)| {
            let patch = 4;
            let branches: Vec<BranchSpec> = shapes
                .iter()
                .enumerate()
                .map(|(i, &(heads, per_head, windowed))| {
                    // Widths shrink and resolutions grow along the pyramid.
                    let dim = heads * per_head * 4 * (m - i);
                    let mut b = BranchSpec::transformer(dim, heads, patch * 4 * (i + 1), patch, depth);
                    if windowed {
                        b = b.with_attention(AttentionMode::Windowed(4));
                    }
                    b
                })
                .collect();
            let mut interactions = InteractionSchedule::default_for(m, depth);
            interactions.count = if m > 1 { count } else { 0 };
            interactions.deform_points = points;
            if regular {
                interactions.attention_impl = AttentionImpl::Regular;
            }
            if m > 1 && mode == 2 {
                interactions.directions = vec![Direction { src: 1, dst: 2 }];
            }
            let merge = MergeSpec {
                mode: if mode == 1 { MergeMode::Classification } else { MergeMode::Dense },
                proj: if linear { ProjKind::Linear } else { ProjKind::Conv },
                classes: if mode == 1 { classes + 1 } else { classes },
            };
            PyramidConfig { branches, interactions, merge, seed }
        })
        .prop_filter("valid", |c| c.validate().is_ok())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn render_parse_round_trip(cfg in arb_config()) {
        let text = cfg.render();
        let back = parse_config(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.render(), text);
    }
}

#[test]
fn seeds_beyond_toml_integers_are_rejected() {
    let mut cfg = preset("piip-tiny-test").unwrap();
    cfg.seed = i64::MAX as u64 + 1;
    assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
}

#[test]
fn presets_round_trip() {
    for name in PRESETS {
        let cfg = preset(name).unwrap();
        assert_eq!(parse_config(&cfg.render()).unwrap(), cfg, "{name}");
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let tiny = parse_config(&std::fs::read_to_string(dir.join("tiny.toml")).unwrap()).unwrap();
    assert_eq!(tiny, preset("piip-tiny-test").unwrap());
    let cls = parse_config(&std::fs::read_to_string(dir.join("tiny-cls.toml")).unwrap()).unwrap();
    assert_eq!(cls.merge.mode, MergeMode::Classification);
    assert_eq!(cls.seed, 7);
}

fn parse_key(text: &str) -> String {
    match parse_config(text) {
        Err(Error::Parse { key, .. }) => key,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn errors_name_the_offending_key() {
    let branch = "[branch1]\ndim = 8\nheads = 1\ndepth = 1\npatch_size = 4\nresolution = 8\n";
    assert_eq!(parse_key(&format!("{branch}colour = 3\n")), "branch1.colour");
    assert_eq!(parse_key(&branch.replace("dim = 8", "dim = \"eight\"")), "branch1.dim");
    assert_eq!(parse_key(&branch.replace("resolution = 8\n", "")), "branch1.resolution");
    assert_eq!(parse_key(&format!("{branch}[merge]\nmode = \"mean\"\n")), "merge.mode");
    assert_eq!(parse_key(&format!("{branch}[interactions]\ndirections = [\"1=>2\"]\n")), "interactions.directions");
    assert_eq!(parse_key(&format!("{branch}[extra]\n")), "extra");
}
