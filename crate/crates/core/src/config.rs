//! Declarative pyramid configuration, its text format and the built-in presets.
//!
//! The on-disk format is a TOML document with one `[branchN]` table per branch
//! (1-based, branch 1 has the largest width and the smallest input), plus
//! optional `[interactions]` and `[merge]` tables. See `docs/config.md`.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use toml::{Table, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Transformer,
    Convnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Global,
    /// Non-overlapping square windows holding this many tokens.
    Windowed(usize),
}

impl AttentionMode {
    pub fn window_side(self) -> Option<usize> {
        match self {
            AttentionMode::Global => None,
            AttentionMode::Windowed(t) => Some(isqrt(t)),
        }
    }
}

fn isqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchSpec {
    pub arch: Arch,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// Side of the square input image in pixels.
    pub resolution: usize,
    pub mlp_ratio: f64,
    pub attention: AttentionMode,
}

impl BranchSpec {
    pub fn transformer(dim: usize, heads: usize, resolution: usize, patch_size: usize, depth: usize) -> Self {
        BranchSpec {
            arch: Arch::Transformer,
            depth,
            dim,
            heads,
            patch_size,
            resolution,
            mlp_ratio: 4.0,
            attention: AttentionMode::Global,
        }
    }

    pub fn convnet(dim: usize, resolution: usize, patch_size: usize, depth: usize) -> Self {
        BranchSpec { arch: Arch::Convnet, heads: 1, ..BranchSpec::transformer(dim, 1, resolution, patch_size, depth) }
    }

    pub fn with_attention(mut self, attention: AttentionMode) -> Self {
        self.attention = attention;
        self
    }

    /// Token-grid side (`resolution / patch_size`).
    pub fn grid(&self) -> usize {
        self.resolution / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Hidden width of the MLP / pointwise expansion.
    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    fn validate(&self, idx: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("branch{idx}: {m}")));
        if self.depth == 0 {
            return fail("depth must be >= 1".into());
        }
        if self.dim == 0 || self.patch_size == 0 || self.resolution == 0 || self.heads == 0 {
            return fail("dim, heads, patch_size and resolution must be positive".into());
        }
        if self.resolution % self.patch_size != 0 {
            return fail("resolution not divisible by patch_size".into());
        }
        if self.arch == Arch::Transformer && self.dim % self.heads != 0 {
            return fail("dim not divisible by heads".into());
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) || self.mlp_hidden() == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if let AttentionMode::Windowed(t) = self.attention {
            if t == 0 || isqrt(t) * isqrt(t) != t {
                return fail(format!("window of {t} tokens is not a positive square"));
            }
            if self.arch == Arch::Convnet {
                return fail("windowed attention applies to transformer branches only".into());
            }
        }
        Ok(())
    }
}

/// A directed interaction edge: features of `src` are injected into `dst` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Direction {
    pub src: usize,
    pub dst: usize,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.src, self.dst)
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s.split_once("->").ok_or_else(|| format!("`{s}` is not of the form `i->j`"))?;
        let src = a.trim().parse().map_err(|_| format!("bad branch index in `{s}`"))?;
        let dst = b.trim().parse().map_err(|_| format!("bad branch index in `{s}`"))?;
        Ok(Direction { src, dst })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionImpl {
    Deformable,
    /// Dense cross-attention from every query token to every value token.
    Regular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSchedule {
    /// Interaction points along the shared depth.
    pub count: usize,
    /// Sorted, de-duplicated.
    pub directions: Vec<Direction>,
    pub allow_non_adjacent: bool,
    pub attention_impl: AttentionImpl,
    /// `None` selects 8 heads for query widths >= 64, else `max(1, dim / 8)`.
    pub deform_heads: Option<usize>,
    pub deform_points: usize,
    /// Width of the value/sampling space relative to the query width.
    pub deform_ratio: f64,
    pub ffn_ratio: f64,
}

impl InteractionSchedule {
    pub fn bidirectional_adjacent(branches: usize) -> Vec<Direction> {
        let mut d = Vec::new();
        for i in 1..branches {
            d.push(Direction { src: i, dst: i + 1 });
            d.push(Direction { src: i + 1, dst: i });
        }
        d.sort();
        d
    }

    pub fn default_for(branches: usize, depth: usize) -> Self {
        InteractionSchedule {
            count: depth,
            directions: Self::bidirectional_adjacent(branches),
            allow_non_adjacent: false,
            attention_impl: AttentionImpl::Deformable,
            deform_heads: None,
            deform_points: 4,
            deform_ratio: 1.0,
            ffn_ratio: 0.25,
        }
    }

    pub fn heads_for(&self, query_dim: usize) -> usize {
        match self.deform_heads {
            Some(h) => h,
            None if query_dim >= 64 => 8,
            None => (query_dim / 8).max(1),
        }
    }

    /// Width of the value projection / sampled features for a query of `query_dim`.
    pub fn inner_dim(&self, query_dim: usize) -> usize {
        match self.attention_impl {
            AttentionImpl::Deformable => ((query_dim as f64 * self.deform_ratio).round() as usize).max(1),
            AttentionImpl::Regular => query_dim,
        }
    }

    pub fn ffn_hidden(&self, query_dim: usize) -> usize {
        ((query_dim as f64 * self.ffn_ratio).round() as usize).max(1)
    }

    /// Unordered branch pairs `(a, b)`, `a < b`, that carry at least one direction.
    pub fn unit_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> =
            self.directions.iter().map(|d| (d.src.min(d.dst), d.src.max(d.dst))).collect();
        pairs.sort();
        pairs.dedup();
        pairs
    }

    pub fn has(&self, src: usize, dst: usize) -> bool {
        self.directions.contains(&Direction { src, dst })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMode {
    /// Project, upsample and weight-sum all branches into one map.
    Dense,
    /// Per-branch pooled heads whose logits are averaged.
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjKind {
    /// conv3x3 -> GroupNorm -> GELU -> conv3x3
    Conv,
    /// linear -> GroupNorm
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeSpec {
    pub mode: MergeMode,
    pub proj: ProjKind,
    /// Number of classes; 0 means no classifier (dense output only).
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig {
    pub branches: Vec<BranchSpec>,
    pub interactions: InteractionSchedule,
    pub merge: MergeSpec,
    pub seed: u64,
}

pub const PRESETS: &[&str] = &["piip-b", "piip-tsb-toy", "piip-sbl-toy", "vit-b-baseline", "piip-tiny-test"];

impl PyramidConfig {
    pub fn depth(&self) -> usize {
        self.branches[0].depth
    }

    pub fn largest_resolution(&self) -> usize {
        self.branches.iter().map(|b| b.resolution).max().unwrap_or(0)
    }

    pub fn branch(&self, id: usize) -> &BranchSpec {
        &self.branches[id - 1]
    }

    /// Block counts after which each interaction point runs. With `c` points
    /// over `n` blocks the stride is `n / c`; trailing remainder blocks carry none.
    pub fn interaction_blocks(&self) -> Vec<usize> {
        let c = self.interactions.count;
        if c == 0 {
            return Vec::new();
        }
        let stride = self.depth() / c;
        (1..=c).map(|k| k * stride).collect()
    }

    /// GroupNorm group count for the merge projections: `gcd(32, D_1)`.
    pub fn proj_groups(&self) -> usize {
        gcd(32, self.branches[0].dim)
    }

    pub fn with_resolution(mut self, branch_id: usize, resolution: usize) -> Self {
        self.branches[branch_id - 1].resolution = resolution;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Validation("at least one branch is required".into()));
        }
        if i64::try_from(self.seed).is_err() {
            return Err(Error::Validation(format!("seed {} does not fit a TOML integer", self.seed)));
        }
        for (i, b) in self.branches.iter().enumerate() {
            b.validate(i + 1)?;
        }
        let depth = self.depth();
        if self.branches.iter().any(|b| b.depth != depth) {
            return Err(Error::Validation("all branches must share the same depth".into()));
        }
        for w in self.branches.windows(2) {
            if w[1].dim > w[0].dim || w[1].resolution < w[0].resolution {
                return Err(Error::Validation(
                    "parameter-inverted ordering violated: dims must be non-increasing and resolutions \
                     non-decreasing with branch index"
                        .into(),
                ));
            }
        }
        let it = &self.interactions;
        if it.count > depth {
            return Err(Error::Validation(format!("interactions.count {} exceeds depth {depth}", it.count)));
        }
        let m = self.branches.len();
        for d in &it.directions {
            if d.src == 0 || d.dst == 0 || d.src > m || d.dst > m {
                return Err(Error::Validation(format!("direction {d} references a missing branch")));
            }
            if d.src == d.dst {
                return Err(Error::Validation(format!("direction {d} is a self-loop")));
            }
            if d.src.abs_diff(d.dst) != 1 && !it.allow_non_adjacent {
                return Err(Error::Validation(format!(
                    "direction {d} connects non-adjacent branches (set allow_non_adjacent)"
                )));
            }
        }
        if it.directions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("directions must be sorted and unique".into()));
        }
        if it.deform_points == 0 || it.deform_heads == Some(0) {
            return Err(Error::Validation("deform_points and deform_heads must be positive".into()));
        }
        if !(it.deform_ratio > 0.0 && it.deform_ratio <= 1.0) {
            return Err(Error::Validation("deform_ratio must lie in (0, 1]".into()));
        }
        if !(it.ffn_ratio > 0.0 && it.ffn_ratio.is_finite()) {
            return Err(Error::Validation("ffn_ratio must be positive".into()));
        }
        for d in &it.directions {
            let q = self.branch(d.dst).dim;
            let heads = it.heads_for(q);
            let inner = it.inner_dim(q);
            if inner % heads != 0 {
                return Err(Error::Validation(format!(
                    "direction {d}: attention width {inner} not divisible by {heads} heads"
                )));
            }
        }
        if self.merge.mode == MergeMode::Classification && self.merge.classes == 0 {
            return Err(Error::Validation("classification merge needs merge.classes >= 1".into()));
        }
        Ok(())
    }

    /// Deterministic text form accepted by [`parse_config`].
    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "seed = {}", self.seed).unwrap();
        for (i, b) in self.branches.iter().enumerate() {
            writeln!(s, "\n[branch{}]", i + 1).unwrap();
            let arch = match b.arch {
                Arch::Transformer => "transformer",
                Arch::Convnet => "convnet",
            };
            writeln!(s, "arch = \"{arch}\"").unwrap();
            writeln!(s, "depth = {}", b.depth).unwrap();
            writeln!(s, "dim = {}", b.dim).unwrap();
            writeln!(s, "heads = {}", b.heads).unwrap();
            writeln!(s, "patch_size = {}", b.patch_size).unwrap();
            writeln!(s, "resolution = {}", b.resolution).unwrap();
            writeln!(s, "mlp_ratio = {:?}", b.mlp_ratio).unwrap();
            let attn = match b.attention {
                AttentionMode::Global => "global".to_string(),
                AttentionMode::Windowed(t) => format!("windowed:{t}"),
            };
            writeln!(s, "attention = \"{attn}\"").unwrap();
        }
        let it = &self.interactions;
        writeln!(s, "\n[interactions]").unwrap();
        writeln!(s, "count = {}", it.count).unwrap();
        let dirs: Vec<String> = it.directions.iter().map(|d| format!("\"{d}\"")).collect();
        writeln!(s, "directions = [{}]", dirs.join(", ")).unwrap();
        writeln!(s, "allow_non_adjacent = {}", it.allow_non_adjacent).unwrap();
        let imp = match it.attention_impl {
            AttentionImpl::Deformable => "deformable",
            AttentionImpl::Regular => "regular",
        };
        writeln!(s, "attention_impl = \"{imp}\"").unwrap();
        if let Some(h) = it.deform_heads {
            writeln!(s, "deform_heads = {h}").unwrap();
        }
        writeln!(s, "deform_points = {}", it.deform_points).unwrap();
        writeln!(s, "deform_ratio = {:?}", it.deform_ratio).unwrap();
        writeln!(s, "ffn_ratio = {:?}", it.ffn_ratio).unwrap();
        writeln!(s, "\n[merge]").unwrap();
        let mode = match self.merge.mode {
            MergeMode::Dense => "dense",
            MergeMode::Classification => "classification",
        };
        writeln!(s, "mode = \"{mode}\"").unwrap();
        let proj = match self.merge.proj {
            ProjKind::Conv => "conv",
            ProjKind::Linear => "linear",
        };
        writeln!(s, "proj = \"{proj}\"").unwrap();
        writeln!(s, "classes = {}", self.merge.classes).unwrap();
        s
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

struct Section<'a> {
    name: String,
    table: &'a Table,
}

impl<'a> Section<'a> {
    fn key(&self, k: &str) -> String {
        if self.name.is_empty() {
            k.to_string()
        } else {
            format!("{}.{}", self.name, k)
        }
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for k in self.table.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::parse(self.key(k), "unknown key"));
            }
        }
        Ok(())
    }

    fn uint(&self, k: &str) -> Result<Option<usize>> {
        match self.table.get(k) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
            Some(Value::Integer(_)) => Err(Error::parse(self.key(k), "must be non-negative")),
            Some(_) => Err(Error::parse(self.key(k), "expected an integer")),
        }
    }

    fn float(&self, k: &str) -> Result<Option<f64>> {
        match self.table.get(k) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(*f)),
            Some(Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(_) => Err(Error::parse(self.key(k), "expected a number")),
        }
    }

    fn string(&self, k: &str) -> Result<Option<&'a str>> {
        match self.table.get(k) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.as_str())),
            Some(_) => Err(Error::parse(self.key(k), "expected a string")),
        }
    }

    fn boolean(&self, k: &str) -> Result<Option<bool>> {
        match self.table.get(k) {
            None => Ok(None),
            Some(Value::Boolean(b)) => Ok(Some(*b)),
            Some(_) => Err(Error::parse(self.key(k), "expected true or false")),
        }
    }

    fn required_uint(&self, k: &str) -> Result<usize> {
        self.uint(k)?.ok_or_else(|| Error::parse(self.key(k), "missing required key"))
    }
}

fn parse_branch(sec: &Section) -> Result<BranchSpec> {
    sec.check_keys(&["arch", "depth", "dim", "heads", "patch_size", "resolution", "mlp_ratio", "attention"])?;
    let arch = match sec.string("arch")?.unwrap_or("transformer") {
        "transformer" => Arch::Transformer,
        "convnet" => Arch::Convnet,
        other => return Err(Error::parse(sec.key("arch"), format!("unknown arch `{other}`"))),
    };
    let heads = match (arch, sec.uint("heads")?) {
        (_, Some(h)) => h,
        (Arch::Convnet, None) => 1,
        (Arch::Transformer, None) => return Err(Error::parse(sec.key("heads"), "missing required key")),
    };
    let attention = match sec.string("attention")?.unwrap_or("global") {
        "global" => AttentionMode::Global,
        s => match s.strip_prefix("windowed:").map(str::parse::<usize>) {
            Some(Ok(t)) => AttentionMode::Windowed(t),
            _ => {
                return Err(Error::parse(
                    sec.key("attention"),
                    format!("expected `global` or `windowed:<tokens>`, got `{s}`"),
                ))
            }
        },
    };
    Ok(BranchSpec {
        arch,
        depth: sec.required_uint("depth")?,
        dim: sec.required_uint("dim")?,
        heads,
        patch_size: sec.required_uint("patch_size")?,
        resolution: sec.required_uint("resolution")?,
        mlp_ratio: sec.float("mlp_ratio")?.unwrap_or(4.0),
        attention,
    })
}

fn parse_interactions(sec: Option<&Section>, branches: usize, depth: usize) -> Result<InteractionSchedule> {
    let mut it = InteractionSchedule::default_for(branches, depth);
    let Some(sec) = sec else { return Ok(it) };
    sec.check_keys(&[
        "count",
        "directions",
        "allow_non_adjacent",
        "attention_impl",
        "deform_heads",
        "deform_points",
        "deform_ratio",
        "ffn_ratio",
    ])?;
    if let Some(c) = sec.uint("count")? {
        it.count = c;
    }
    match sec.table.get("directions") {
        None => {}
        Some(Value::Array(items)) => {
            let mut dirs = Vec::with_capacity(items.len());
            for item in items {
                let Value::String(s) = item else {
                    return Err(Error::parse(sec.key("directions"), "entries must be strings like \"1->2\""));
                };
                dirs.push(s.parse::<Direction>().map_err(|m| Error::parse(sec.key("directions"), m))?);
            }
            dirs.sort();
            dirs.dedup();
            it.directions = dirs;
        }
        Some(_) => return Err(Error::parse(sec.key("directions"), "expected an array of strings")),
    }
    if let Some(b) = sec.boolean("allow_non_adjacent")? {
        it.allow_non_adjacent = b;
    }
    if let Some(s) = sec.string("attention_impl")? {
        it.attention_impl = match s {
            "deformable" => AttentionImpl::Deformable,
            "regular" => AttentionImpl::Regular,
            other => return Err(Error::parse(sec.key("attention_impl"), format!("unknown value `{other}`"))),
        };
    }
    it.deform_heads = sec.uint("deform_heads")?;
    if let Some(k) = sec.uint("deform_points")? {
        it.deform_points = k;
    }
    if let Some(r) = sec.float("deform_ratio")? {
        it.deform_ratio = r;
    }
    if let Some(r) = sec.float("ffn_ratio")? {
        it.ffn_ratio = r;
    }
    Ok(it)
}

fn parse_merge(sec: Option<&Section>) -> Result<MergeSpec> {
    let mut m = MergeSpec { mode: MergeMode::Dense, proj: ProjKind::Conv, classes: 0 };
    let Some(sec) = sec else { return Ok(m) };
    sec.check_keys(&["mode", "proj", "classes"])?;
    if let Some(s) = sec.string("mode")? {
        m.mode = match s {
            "dense" => MergeMode::Dense,
            "classification" => MergeMode::Classification,
            other => return Err(Error::parse(sec.key("mode"), format!("unknown value `{other}`"))),
        };
    }
    if let Some(s) = sec.string("proj")? {
        m.proj = match s {
            "conv" => ProjKind::Conv,
            "linear" => ProjKind::Linear,
            other => return Err(Error::parse(sec.key("proj"), format!("unknown value `{other}`"))),
        };
    }
    if let Some(c) = sec.uint("classes")? {
        m.classes = c;
    }
    Ok(m)
}

/// Parses and validates a config document, filling defaults.
pub fn parse_config(text: &str) -> Result<PyramidConfig> {
    let doc: Table = text.parse().map_err(|e: toml::de::Error| {
        let msg = e.message().to_string();
        Error::parse("<document>", msg)
    })?;
    let mut branches: Vec<(usize, BranchSpec)> = Vec::new();
    let mut interactions = None;
    let mut merge = None;
    let mut seed = 0u64;
    for (key, value) in &doc {
        if key == "seed" {
            match value {
                Value::Integer(i) if *i >= 0 => seed = *i as u64,
                _ => return Err(Error::parse("seed", "expected a non-negative integer")),
            }
            continue;
        }
        let Value::Table(table) = value else {
            return Err(Error::parse(key, "unknown top-level key"));
        };
        let sec = Section { name: key.clone(), table };
        if key == "interactions" {
            interactions = Some(sec);
        } else if key == "merge" {
            merge = Some(sec);
        } else if let Some(idx) = key.strip_prefix("branch").and_then(|n| n.parse::<usize>().ok()) {
            branches.push((idx, parse_branch(&sec)?));
        } else {
            return Err(Error::parse(key, "unknown section"));
        }
    }
    branches.sort_by_key(|(i, _)| *i);
    for (pos, (idx, _)) in branches.iter().enumerate() {
        if *idx != pos + 1 {
            return Err(Error::parse(format!("branch{idx}"), "branch sections must be numbered 1, 2, ... without gaps"));
        }
    }
    if branches.is_empty() {
        return Err(Error::parse("branch1", "missing required section"));
    }
    let branches: Vec<BranchSpec> = branches.into_iter().map(|(_, b)| b).collect();
    let depth = branches[0].depth;
    let cfg = PyramidConfig {
        interactions: parse_interactions(interactions.as_ref(), branches.len(), depth)?,
        merge: parse_merge(merge.as_ref())?,
        branches,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Built-in configurations; see [`PRESETS`].
pub fn preset(name: &str) -> Result<PyramidConfig> {
    let cfg = match name {
        "piip-b" => {
            let branches = vec![
                BranchSpec::transformer(640, 8, 128, 16, 12),
                BranchSpec::transformer(320, 4, 256, 16, 12),
                BranchSpec::transformer(160, 2, 512, 16, 12).with_attention(AttentionMode::Windowed(256)),
            ];
            let mut it = InteractionSchedule::default_for(3, 12);
            it.deform_ratio = 0.5;
            PyramidConfig {
                branches,
                interactions: it,
                merge: MergeSpec { mode: MergeMode::Dense, proj: ProjKind::Linear, classes: 1000 },
                seed: 0,
            }
        }
        "vit-b-baseline" => PyramidConfig {
            branches: vec![BranchSpec::transformer(768, 12, 224, 16, 12)],
            interactions: InteractionSchedule { count: 0, ..InteractionSchedule::default_for(1, 12) },
            merge: MergeSpec { mode: MergeMode::Dense, proj: ProjKind::Linear, classes: 1000 },
            seed: 0,
        },
        // ViT-B/S/T widths and head counts scaled by 1/8, inputs 448/896/1120 by 1/8.
        "piip-tsb-toy" => PyramidConfig {
            branches: vec![
                BranchSpec::transformer(96, 12, 56, 4, 4),
                BranchSpec::transformer(48, 6, 112, 4, 4),
                BranchSpec::transformer(24, 3, 140, 4, 4),
            ],
            interactions: InteractionSchedule::default_for(3, 4),
            merge: MergeSpec { mode: MergeMode::Dense, proj: ProjKind::Conv, classes: 0 },
            seed: 0,
        },
        // ViT-L/B/S widths scaled by 1/16, inputs 448/896/1344 by 1/8.
        "piip-sbl-toy" => PyramidConfig {
            branches: vec![
                BranchSpec::transformer(64, 16, 56, 4, 4),
                BranchSpec::transformer(48, 12, 112, 4, 4),
                BranchSpec::transformer(24, 6, 168, 4, 4),
            ],
            interactions: InteractionSchedule::default_for(3, 4),
            merge: MergeSpec { mode: MergeMode::Dense, proj: ProjKind::Conv, classes: 0 },
            seed: 0,
        },
        "piip-tiny-test" => PyramidConfig {
            branches: vec![
                BranchSpec::transformer(32, 4, 16, 4, 2),
                BranchSpec::transformer(16, 2, 32, 4, 2),
                BranchSpec::transformer(8, 1, 64, 4, 2).with_attention(AttentionMode::Windowed(64)),
            ],
            interactions: InteractionSchedule::default_for(3, 2),
            merge: MergeSpec { mode: MergeMode::Dense, proj: ProjKind::Linear, classes: 10 },
            seed: 0,
        },
        _ => return Err(Error::UnknownPreset { name: name.to_string(), valid: PRESETS.join(", ") }),
    };
    debug_assert!(cfg.validate().is_ok());
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piip_b_preset_matches_published_configuration() {
        let cfg = preset("piip-b").unwrap();
        cfg.validate().unwrap();
        let dims: Vec<_> = cfg.branches.iter().map(|b| b.dim).collect();
        let heads: Vec<_> = cfg.branches.iter().map(|b| b.heads).collect();
        let res: Vec<_> = cfg.branches.iter().map(|b| b.resolution).collect();
        assert_eq!(dims, [640, 320, 160]);
        assert_eq!(heads, [8, 4, 2]);
        assert_eq!(res, [128, 256, 512]);
        assert!(cfg.branches.iter().all(|b| b.depth == 12));
        assert_eq!(cfg.interactions.count, 12);
    }

    #[test]
    fn parse_piip_b_text() {
        let cfg = parse_config(&preset("piip-b").unwrap().render()).unwrap();
        assert_eq!(cfg.branches.len(), 3);
        assert_eq!(cfg.branches[2].dim, 160);
        assert_eq!(cfg.branches[2].resolution, 512);
        assert_eq!(cfg, preset("piip-b").unwrap());
    }

    #[test]
    fn other_presets() {
        let vit = preset("vit-b-baseline").unwrap();
        assert_eq!(vit.branches.len(), 1);
        let b = &vit.branches[0];
        assert_eq!((b.dim, b.depth, b.heads, b.patch_size, b.resolution), (768, 12, 12, 16, 224));
        let tiny = preset("piip-tiny-test").unwrap();
        let dims: Vec<_> = tiny.branches.iter().map(|b| b.dim).collect();
        let res: Vec<_> = tiny.branches.iter().map(|b| b.resolution).collect();
        assert_eq!((dims, res, tiny.depth()), (vec![32, 16, 8], vec![16, 32, 64], 2));
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn unknown_preset_lists_valid_names() {
        let err = preset("piip-xl").unwrap_err().to_string();
        assert!(err.contains("piip-tiny-test") && err.contains("piip-b"));
    }

    #[test]
    fn single_branch_without_interactions_is_valid() {
        let text = "[branch1]\ndepth = 2\ndim = 8\nheads = 2\npatch_size = 4\nresolution = 16\n\n[interactions]\ncount = 0\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.branches.len(), 1);
        assert!(cfg.interactions.directions.is_empty());
        assert_eq!(cfg.merge.mode, MergeMode::Dense);
    }

    #[test]
    fn indivisible_resolution_is_rejected() {
        let text = "[branch1]\ndepth = 2\ndim = 8\nheads = 2\npatch_size = 16\nresolution = 100\n";
        let err = parse_config(text).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("resolution not divisible by patch_size"));
    }

    #[test]
    fn parse_errors_name_the_key() {
        let text = "[branch1]\ndepth = 2\ndim = 8\nheads = 2\npatch_size = 4\nresolution = 16\nwidht = 3\n";
        match parse_config(text).unwrap_err() {
            Error::Parse { key, .. } => assert_eq!(key, "branch1.widht"),
            e => panic!("unexpected {e}"),
        }
        let text = "[branch1]\ndepth = \"two\"\ndim = 8\nheads = 2\npatch_size = 4\nresolution = 16\n";
        match parse_config(text).unwrap_err() {
            Error::Parse { key, .. } => assert_eq!(key, "branch1.depth"),
            e => panic!("unexpected {e}"),
        }
        match parse_config("[branch2]\ndepth = 1\ndim = 8\nheads = 2\npatch_size = 4\nresolution = 16\n").unwrap_err() {
            Error::Parse { key, .. } => assert_eq!(key, "branch2"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn ordering_violation_is_rejected() {
        let mut cfg = preset("piip-tiny-test").unwrap();
        cfg.branches[1].dim = 64;
        assert!(cfg.validate().unwrap_err().to_string().contains("parameter-inverted"));
    }

    #[test]
    fn non_adjacent_direction_needs_flag() {
        let mut cfg = preset("piip-tiny-test").unwrap();
        cfg.interactions.directions = vec![Direction { src: 1, dst: 3 }];
        assert!(cfg.validate().is_err());
        cfg.interactions.allow_non_adjacent = true;
        cfg.validate().unwrap();
        assert_eq!(cfg.interactions.unit_pairs(), vec![(1, 3)]);
    }

    #[test]
    fn interaction_points_are_uniform() {
        let mut cfg = preset("piip-b").unwrap();
        assert_eq!(cfg.interaction_blocks(), (1..=12).collect::<Vec<_>>());
        cfg.interactions.count = 4;
        assert_eq!(cfg.interaction_blocks(), vec![3, 6, 9, 12]);
        cfg.interactions.count = 5;
        assert_eq!(cfg.interaction_blocks(), vec![2, 4, 6, 8, 10]);
        cfg.interactions.count = 0;
        assert!(cfg.interaction_blocks().is_empty());
    }

    #[test]
    fn deform_head_defaults() {
        let it = InteractionSchedule::default_for(3, 12);
        assert_eq!(it.heads_for(640), 8);
        assert_eq!(it.heads_for(64), 8);
        assert_eq!(it.heads_for(32), 4);
        assert_eq!(it.heads_for(4), 1);
        assert_eq!(it.ffn_hidden(640), 160);
    }
}
