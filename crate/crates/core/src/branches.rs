//! Per-branch feature extractors, exposed block by block so that interaction
//! points can be interleaved between them.

use crate::autograd::{Graph, Var};
use crate::config::{Arch, AttentionMode, BranchSpec};
use crate::error::{Error, Result};
use crate::layers::{Linear, Norm, INIT_STD};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::primitives::{full_group, window_groups, ConvGeom};
use crate::tensor::{FeatureMap, Tensor};

pub const CONV_KERNEL: usize = 7;

/// Patchify convolution plus either a learnable position grid (transformer)
/// or a LayerNorm (convnet stem).
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub pos_embed: Option<ParamId>,
    pub pos_grid: usize,
    pub norm: Option<Norm>,
    pub patch_size: usize,
    pub dim: usize,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        spec: &BranchSpec,
        pos_grid: usize,
    ) -> Self {
        let (p, d) = (spec.patch_size, spec.dim);
        let kernel = store.add(format!("{name}.weight"), init.trunc_normal(vec![p, p, 3, d], INIT_STD), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![d]), false);
        let (pos_embed, norm) = match spec.arch {
            Arch::Transformer => (
                Some(store.add(format!("{name}.pos"), init.trunc_normal(vec![pos_grid, pos_grid, d], INIT_STD), false)),
                None,
            ),
            Arch::Convnet => (None, Some(Norm::new(store, &format!("{name}.norm"), d))),
        };
        PatchEmbed { kernel, bias, pos_embed, pos_grid, norm, patch_size: p, dim: d }
    }

    /// `image` holds `res * res` RGB rows.
    pub fn forward(&self, g: &mut Graph, image: Var, res: usize) -> Result<Var> {
        let geom = ConvGeom {
            h: res,
            w: res,
            cin: 3,
            cout: self.dim,
            kh: self.patch_size,
            kw: self.patch_size,
            stride: self.patch_size,
            pad: 0,
        };
        let (k, b) = (g.param(self.kernel), g.param(self.bias));
        let x = g.conv2d(image, k, Some(b), geom)?;
        let grid = res / self.patch_size;
        if let Some(pos) = self.pos_embed {
            let pv = g.param(pos);
            let pv = g.resize(pv, self.pos_grid, self.pos_grid, grid, grid)?;
            return g.add(x, pv);
        }
        match &self.norm {
            Some(n) => n.layer_norm(g, x),
            None => Ok(x),
        }
    }
}

/// Pre-norm ViT block with global or windowed multi-head self-attention.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub dim: usize,
    pub attention: AttentionMode,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, spec: &BranchSpec) -> Self {
        let d = spec.dim;
        let hidden = spec.mlp_hidden();
        TransformerBlock {
            norm1: Norm::new(store, &format!("{name}.norm1"), d),
            qkv: Linear::new(store, init, &format!("{name}.attn.qkv"), d, 3 * d),
            proj: Linear::new(store, init, &format!("{name}.attn.proj"), d, d),
            norm2: Norm::new(store, &format!("{name}.norm2"), d),
            fc1: Linear::new(store, init, &format!("{name}.mlp.fc1"), d, hidden),
            fc2: Linear::new(store, init, &format!("{name}.mlp.fc2"), hidden, d),
            heads: spec.heads,
            dim: d,
            attention: spec.attention,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, gh: usize, gw: usize) -> Result<Var> {
        let d = self.dim;
        let h = self.norm1.layer_norm(g, x)?;
        let (h, ph, pw, groups) = match self.attention.window_side() {
            None => (h, gh, gw, full_group(gh * gw, gh * gw)),
            Some(side) => {
                let ph = gh.div_ceil(side) * side;
                let pw = gw.div_ceil(side) * side;
                let h = if (ph, pw) != (gh, gw) { g.pad_grid(h, gh, gw, ph, pw)? } else { h };
                (h, ph, pw, window_groups(ph, pw, side))
            }
        };
        let qkv = self.qkv.forward(g, h)?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, d)?;
        let v = g.slice_cols(qkv, 2 * d, d)?;
        let mut a = g.attention(q, k, v, self.heads, groups)?;
        if (ph, pw) != (gh, gw) {
            a = g.crop_grid(a, ph, pw, gh, gw)?;
        }
        let a = self.proj.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = self.norm2.layer_norm(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}

/// ConvNeXt-style block: depthwise 7x7, LayerNorm, pointwise expansion, GELU,
/// pointwise projection, per-channel residual scale.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub dw_kernel: ParamId,
    pub dw_bias: ParamId,
    pub norm: Norm,
    pub pw1: Linear,
    pub pw2: Linear,
    pub scale: ParamId,
    pub dim: usize,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, spec: &BranchSpec) -> Self {
        let d = spec.dim;
        let hidden = spec.mlp_hidden();
        ConvBlock {
            dw_kernel: store.add(
                format!("{name}.dwconv.weight"),
                init.trunc_normal(vec![CONV_KERNEL, CONV_KERNEL, d], INIT_STD),
                true,
            ),
            dw_bias: store.add(format!("{name}.dwconv.bias"), Tensor::zeros(vec![d]), false),
            norm: Norm::new(store, &format!("{name}.norm"), d),
            pw1: Linear::new(store, init, &format!("{name}.pw1"), d, hidden),
            pw2: Linear::new(store, init, &format!("{name}.pw2"), hidden, d),
            scale: store.add(format!("{name}.scale"), Tensor::zeros(vec![d]), false),
            dim: d,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, gh: usize, gw: usize) -> Result<Var> {
        let (k, b) = (g.param(self.dw_kernel), g.param(self.dw_bias));
        let h = g.depthwise(x, k, Some(b), gh, gw, CONV_KERNEL)?;
        let h = self.norm.layer_norm(g, h)?;
        let h = self.pw1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.pw2.forward(g, h)?;
        let s = g.param(self.scale);
        let h = g.mul_channels(h, s)?;
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Transformer(TransformerBlock),
    Conv(ConvBlock),
}

impl Block {
    pub fn forward(&self, g: &mut Graph, x: Var, gh: usize, gw: usize) -> Result<Var> {
        match self {
            Block::Transformer(b) => b.forward(g, x, gh, gw),
            Block::Conv(b) => b.forward(g, x, gh, gw),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Block::Transformer(b) => b.dim,
            Block::Conv(b) => b.dim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub id: usize,
    pub spec: BranchSpec,
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
}

impl Branch {
    pub fn build(store: &mut ParamStore, init: &mut Initializer, id: usize, spec: &BranchSpec) -> Self {
        let prefix = format!("branch{id}");
        let embed = PatchEmbed::new(store, init, &format!("{prefix}.embed"), spec, spec.grid());
        let blocks = (0..spec.depth)
            .map(|k| {
                let name = format!("{prefix}.block{k}");
                match spec.arch {
                    Arch::Transformer => Block::Transformer(TransformerBlock::new(store, init, &name, spec)),
                    Arch::Convnet => Block::Conv(ConvBlock::new(store, init, &name, spec)),
                }
            })
            .collect();
        Branch { id, spec: spec.clone(), embed, blocks }
    }

    pub fn grid(&self) -> usize {
        self.spec.grid()
    }

    /// Applies blocks `[from, to)` on the tape.
    pub fn forward_segment(&self, g: &mut Graph, x: Var, from: usize, to: usize) -> Result<Var> {
        if from > to || to > self.blocks.len() {
            return Err(Error::Range(format!("block range [{from}, {to}) outside depth {}", self.blocks.len())));
        }
        let n = self.grid();
        let mut x = x;
        for block in &self.blocks[from..to] {
            x = block.forward(g, x, n, n)?;
        }
        Ok(x)
    }
}

fn image_var(g: &mut Graph, image: &Tensor, res: usize) -> Result<Var> {
    let s = image.shape();
    if s.len() != 3 || s[0] != res || s[1] != res || s[2] != 3 {
        return Err(Error::Shape(format!("expected a {res}x{res}x3 image, got {s:?}")));
    }
    Ok(g.constant(image.clone().reshape(vec![res * res, 3])?))
}

fn to_feature_map(g: &Graph, v: Var, grid: usize, branch_id: usize) -> Result<FeatureMap> {
    FeatureMap::from_tensor(g.value(v).clone(), grid, grid, branch_id)
}

fn feature_var(g: &mut Graph, x: &FeatureMap, dim: usize) -> Result<Var> {
    if x.dim != dim {
        return Err(Error::Shape(format!("feature dim {} does not match block dim {dim}", x.dim)));
    }
    Ok(g.constant(x.to_matrix()))
}

/// Embeds an image of the branch's native resolution into its token grid.
pub fn embed(store: &ParamStore, branch: &Branch, image: &Tensor) -> Result<FeatureMap> {
    let mut g = Graph::new(store);
    let img = image_var(&mut g, image, branch.spec.resolution)?;
    let out = branch.embed.forward(&mut g, img, branch.spec.resolution)?;
    to_feature_map(&g, out, branch.grid(), branch.id)
}

pub fn block_forward(store: &ParamStore, block: &Block, x: &FeatureMap) -> Result<FeatureMap> {
    let mut g = Graph::new(store);
    let v = feature_var(&mut g, x, block.dim())?;
    let out = block.forward(&mut g, v, x.grid_h, x.grid_w)?;
    FeatureMap::from_tensor(g.value(out).clone(), x.grid_h, x.grid_w, x.branch_id)
}

pub fn branch_forward_segment(
    store: &ParamStore,
    branch: &Branch,
    x: &FeatureMap,
    from: usize,
    to: usize,
) -> Result<FeatureMap> {
    let mut g = Graph::new(store);
    let v = feature_var(&mut g, x, branch.spec.dim)?;
    let out = branch.forward_segment(&mut g, v, from, to)?;
    to_feature_map(&g, out, branch.grid(), branch.id)
}
