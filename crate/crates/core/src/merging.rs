//! Branch merging: project every branch to the widest dimension, upsample to
//! the finest grid and take a learnable weighted sum. Classification instead
//! averages per-branch pooled logits.

use crate::autograd::{Graph, Var};
use crate::config::{MergeMode, ProjKind, PyramidConfig};
use crate::error::{Error, Result};
use crate::layers::{Linear, Norm, INIT_STD};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::primitives::ConvGeom;
use crate::tensor::{FeatureMap, Tensor};

/// Projection stack `Proj_j` mapping a branch's width to `D_1`.
#[derive(Debug, Clone)]
pub enum Proj {
    /// linear -> GroupNorm
    Linear { fc: Linear, norm: Norm, groups: usize },
    /// conv3x3 -> GroupNorm -> GELU -> conv3x3
    Conv {
        conv1: ParamId,
        bias1: ParamId,
        norm: Norm,
        conv2: ParamId,
        bias2: ParamId,
        groups: usize,
        cin: usize,
        cout: usize,
    },
}

impl Proj {
    fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        kind: ProjKind,
        cin: usize,
        cout: usize,
        groups: usize,
    ) -> Self {
        match kind {
            ProjKind::Linear => Proj::Linear {
                fc: Linear::new(store, init, &format!("{name}.fc"), cin, cout),
                norm: Norm::new(store, &format!("{name}.norm"), cout),
                groups,
            },
            ProjKind::Conv => Proj::Conv {
                conv1: store.add(format!("{name}.conv1.weight"), init.trunc_normal(vec![3, 3, cin, cout], INIT_STD), true),
                bias1: store.add(format!("{name}.conv1.bias"), Tensor::zeros(vec![cout]), false),
                norm: Norm::new(store, &format!("{name}.norm"), cout),
                conv2: store.add(format!("{name}.conv2.weight"), init.trunc_normal(vec![3, 3, cout, cout], INIT_STD), true),
                bias2: store.add(format!("{name}.conv2.bias"), Tensor::zeros(vec![cout]), false),
                groups,
                cin,
                cout,
            },
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, grid: usize) -> Result<Var> {
        match self {
            Proj::Linear { fc, norm, groups } => {
                let y = fc.forward(g, x)?;
                norm.group_norm(g, y, *groups)
            }
            Proj::Conv { conv1, bias1, norm, conv2, bias2, groups, cin, cout } => {
                let geom = |cin, cout| ConvGeom { h: grid, w: grid, cin, cout, kh: 3, kw: 3, stride: 1, pad: 1 };
                let (w1, b1) = (g.param(*conv1), g.param(*bias1));
                let y = g.conv2d(x, w1, Some(b1), geom(*cin, *cout))?;
                let y = norm.group_norm(g, y, *groups)?;
                let y = g.gelu(y);
                let (w2, b2) = (g.param(*conv2), g.param(*bias2));
                g.conv2d(y, w2, Some(b2), geom(*cout, *cout))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MergeModule {
    /// `None` for branch 1 (identity).
    pub projs: Vec<Option<Proj>>,
    /// One single-element scalar per branch.
    pub weights: Vec<ParamId>,
    pub grids: Vec<usize>,
    pub dims: Vec<usize>,
    pub target_grid: usize,
    pub out_dim: usize,
}

impl MergeModule {
    pub fn build(store: &mut ParamStore, init: &mut Initializer, cfg: &PyramidConfig) -> Self {
        let m = cfg.branches.len();
        let out_dim = cfg.branches[0].dim;
        let groups = cfg.proj_groups();
        let projs = cfg
            .branches
            .iter()
            .enumerate()
            .map(|(j, b)| {
                (j > 0).then(|| Proj::new(store, init, &format!("merge.proj{}", j + 1), cfg.merge.proj, b.dim, out_dim, groups))
            })
            .collect();
        let weights = (1..=m)
            .map(|j| store.add(format!("merge.w{j}"), Tensor::filled(vec![1], 1.0 / m as f64), false))
            .collect();
        let grids: Vec<usize> = cfg.branches.iter().map(|b| b.grid()).collect();
        MergeModule {
            projs,
            weights,
            target_grid: grids.iter().copied().max().unwrap_or(0),
            grids,
            dims: cfg.branches.iter().map(|b| b.dim).collect(),
            out_dim,
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, features: &[Var]) -> Result<Var> {
        if features.len() != self.projs.len() {
            return Err(Error::Validation(format!(
                "merge expects {} branch features, got {}",
                self.projs.len(),
                features.len()
            )));
        }
        let t = self.target_grid;
        let mut acc: Option<Var> = None;
        for (j, &f) in features.iter().enumerate() {
            let n = self.grids[j];
            let mut x = match &self.projs[j] {
                Some(p) => p.forward(g, f, n)?,
                None => f,
            };
            if n != t {
                x = g.resize(x, n, n, t, t)?;
            }
            let w = g.param(self.weights[j]);
            let x = g.mul_scalar(x, w)?;
            acc = Some(match acc {
                None => x,
                Some(a) => g.add(a, x)?,
            });
        }
        acc.ok_or_else(|| Error::Validation("merge over zero branches".into()))
    }
}

/// Global-average pool -> LayerNorm -> linear, or with `token_norm` the
/// LayerNorm applied per token before pooling.
///
/// The merged map's projected branches end in a per-group normalization whose
/// spatial mean is fixed by its shift, so pooling it first would hide those
/// branches from the classifier; the dense-mode head therefore normalizes
/// tokens first.
#[derive(Debug, Clone)]
pub struct PooledHead {
    pub norm: Norm,
    pub fc: Linear,
    pub token_norm: bool,
}

impl PooledHead {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, dim: usize, classes: usize) -> Self {
        PooledHead {
            norm: Norm::new(store, &format!("{name}.norm"), dim),
            fc: Linear::new(store, init, &format!("{name}.fc"), dim, classes),
            token_norm: false,
        }
    }

    pub fn classes(&self) -> usize {
        self.fc.fan_out
    }

    pub(crate) fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = if self.token_norm {
            let t = self.norm.layer_norm(g, x)?;
            g.mean_rows(t)
        } else {
            let p = g.mean_rows(x);
            self.norm.layer_norm(g, p)?
        };
        self.fc.forward(g, p)
    }
}

/// One pooled head per branch; scores are the mean of the branch logits.
#[derive(Debug, Clone)]
pub struct ClassificationHead {
    pub heads: Vec<PooledHead>,
}

impl ClassificationHead {
    pub fn build(store: &mut ParamStore, init: &mut Initializer, cfg: &PyramidConfig) -> Self {
        let heads = cfg
            .branches
            .iter()
            .enumerate()
            .map(|(j, b)| PooledHead::new(store, init, &format!("head{}", j + 1), b.dim, cfg.merge.classes))
            .collect();
        ClassificationHead { heads }
    }

    fn check(&self, n: usize) -> Result<usize> {
        if n != self.heads.len() {
            return Err(Error::Validation(format!("classify expects {} branch features, got {n}", self.heads.len())));
        }
        let c = self.heads.first().map(PooledHead::classes).unwrap_or(0);
        if self.heads.iter().any(|h| h.classes() != c) {
            return Err(Error::Validation("branch heads disagree on the class count".into()));
        }
        Ok(c)
    }

    pub(crate) fn forward(&self, g: &mut Graph, features: &[Var]) -> Result<Var> {
        self.check(features.len())?;
        let mut acc: Option<Var> = None;
        for (h, &f) in self.heads.iter().zip(features) {
            let l = h.forward(g, f)?;
            acc = Some(match acc {
                None => l,
                Some(a) => g.add(a, l)?,
            });
        }
        let acc = acc.ok_or_else(|| Error::Validation("classify over zero branches".into()))?;
        Ok(g.scale(acc, 1.0 / features.len() as f64))
    }
}

/// Output stage of a model.
#[derive(Debug, Clone)]
pub enum MergeStage {
    /// Dense merge, optionally followed by a pooled head on the merged map.
    Dense { module: MergeModule, head: Option<PooledHead> },
    Classification(ClassificationHead),
}

impl MergeStage {
    pub fn build(store: &mut ParamStore, init: &mut Initializer, cfg: &PyramidConfig) -> Self {
        match cfg.merge.mode {
            MergeMode::Dense => {
                let module = MergeModule::build(store, init, cfg);
                let head = (cfg.merge.classes > 0).then(|| PooledHead {
                    token_norm: true,
                    ..PooledHead::new(store, init, "head", module.out_dim, cfg.merge.classes)
                });
                MergeStage::Dense { module, head }
            }
            MergeMode::Classification => MergeStage::Classification(ClassificationHead::build(store, init, cfg)),
        }
    }

    pub fn has_classifier(&self) -> bool {
        !matches!(self, MergeStage::Dense { head: None, .. })
    }
}

/// Mean of per-branch logit vectors.
pub fn average_logits(logits: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = logits.first() else {
        return Err(Error::Validation("no branch logits to average".into()));
    };
    if logits.iter().any(|l| l.len() != first.len()) {
        return Err(Error::Validation("branch logits disagree on the class count".into()));
    }
    let mut out = vec![0.0; first.len()];
    for l in logits {
        for (o, v) in out.iter_mut().zip(l) {
            *o += v;
        }
    }
    let m = logits.len() as f64;
    Ok(out.into_iter().map(|v| v / m).collect())
}

fn feature_vars(g: &mut Graph, features: &[FeatureMap], dims: &[usize], grids: &[usize]) -> Result<Vec<Var>> {
    if features.len() != dims.len() {
        return Err(Error::Validation(format!("expected {} branch features, got {}", dims.len(), features.len())));
    }
    features
        .iter()
        .enumerate()
        .map(|(j, f)| {
            if f.dim != dims[j] || f.grid_h != grids[j] || f.grid_w != grids[j] {
                return Err(Error::Shape(format!(
                    "branch {} feature is {}x{}x{}, expected {}x{}x{}",
                    j + 1,
                    f.grid_h,
                    f.grid_w,
                    f.dim,
                    grids[j],
                    grids[j],
                    dims[j]
                )));
            }
            Ok(g.constant(f.to_matrix()))
        })
        .collect()
}

/// `F_out = sum_j w_j * Upsample(Proj_j(F_j))` on the finest grid at width `D_1`.
pub fn branch_merge(store: &ParamStore, features: &[FeatureMap], merge: &MergeModule) -> Result<FeatureMap> {
    let mut g = Graph::new(store);
    let vars = feature_vars(&mut g, features, &merge.dims, &merge.grids)?;
    let out = merge.forward(&mut g, &vars)?;
    FeatureMap::from_tensor(g.value(out).clone(), merge.target_grid, merge.target_grid, 0)
}

/// Averaged class scores of the per-branch pooled heads.
pub fn classify(store: &ParamStore, features: &[FeatureMap], heads: &ClassificationHead) -> Result<Vec<f64>> {
    heads.check(features.len())?;
    let mut g = Graph::new(store);
    let mut logits = Vec::with_capacity(features.len());
    for (h, f) in heads.heads.iter().zip(features) {
        if f.dim != h.norm_dim(store) {
            return Err(Error::Shape(format!("branch {} feature width {} does not match its head", f.branch_id, f.dim)));
        }
        let v = g.constant(f.to_matrix());
        let l = h.forward(&mut g, v)?;
        logits.push(g.value(l).data().to_vec());
    }
    average_logits(&logits)
}

impl PooledHead {
    fn norm_dim(&self, store: &ParamStore) -> usize {
        store.get(self.norm.gain).len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feats(cfg: &PyramidConfig, rng: &mut ChaCha8Rng) -> Vec<FeatureMap> {
        cfg.branches
            .iter()
            .enumerate()
            .map(|(j, b)| {
                let n = b.grid();
                let data = (0..n * n * b.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                FeatureMap::new(n, n, b.dim, j + 1, data).unwrap()
            })
            .collect()
    }

    fn set_w(store: &mut ParamStore, m: &MergeModule, w: &[f64]) {
        for (id, v) in m.weights.iter().zip(w) {
            store.get_mut(*id).data_mut()[0] = *v;
        }
    }

    #[test]
    fn output_contract_and_one_hot() {
        for kind in [ProjKind::Linear, ProjKind::Conv] {
            let mut cfg = preset("piip-tiny-test").unwrap();
            cfg.merge.proj = kind;
            let mut store = ParamStore::new();
            let m = MergeModule::build(&mut store, &mut Initializer::seeded(2), &cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let f = feats(&cfg, &mut rng);
            let out = branch_merge(&store, &f, &m).unwrap();
            assert_eq!((out.grid_h, out.grid_w, out.dim), (16, 16, 32));

            set_w(&mut store, &m, &[1.0, 0.0, 0.0]);
            let out = branch_merge(&store, &f, &m).unwrap();
            let up = crate::primitives::bilinear_resize(f[0].tokens(), 16, 16).unwrap();
            assert_eq!(out.data(), up.data());

            set_w(&mut store, &m, &[0.0, 0.0, 0.0]);
            assert!(branch_merge(&store, &f, &m).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_in_weights() {
        let cfg = preset("piip-tiny-test").unwrap();
        let mut store = ParamStore::new();
        let m = MergeModule::build(&mut store, &mut Initializer::seeded(2), &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = feats(&cfg, &mut rng);
        let wa = [0.3, -1.2, 0.7];
        let wb = [-0.4, 0.5, 2.0];
        set_w(&mut store, &m, &wa);
        let a = branch_merge(&store, &f, &m).unwrap();
        set_w(&mut store, &m, &wb);
        let b = branch_merge(&store, &f, &m).unwrap();
        let sum: Vec<f64> = wa.iter().zip(&wb).map(|(x, y)| x + y).collect();
        set_w(&mut store, &m, &sum);
        let ab = branch_merge(&store, &f, &m).unwrap();
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(ab.data()) {
            assert!((x + y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_branch_is_an_error() {
        let cfg = preset("piip-tiny-test").unwrap();
        let mut store = ParamStore::new();
        let m = MergeModule::build(&mut store, &mut Initializer::seeded(2), &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = feats(&cfg, &mut rng);
        assert!(branch_merge(&store, &f[..2], &m).is_err());
    }

    #[test]
    fn logit_averaging() {
        let l = vec![1.0, -2.0, 0.5];
        assert_eq!(average_logits(&[l.clone(), l.clone(), l.clone()]).unwrap(), l);
        assert_eq!(average_logits(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        assert!(average_logits(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn classify_runs_and_checks_classes() {
        let mut cfg = preset("piip-tiny-test").unwrap();
        cfg.merge.mode = MergeMode::Classification;
        let mut store = ParamStore::new();
        let mut init = Initializer::seeded(3);
        let mut heads = ClassificationHead::build(&mut store, &mut init, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = feats(&cfg, &mut rng);
        assert_eq!(classify(&store, &f, &heads).unwrap().len(), 10);
        heads.heads[2] = PooledHead::new(&mut store, &mut init, "odd", 8, 7);
        assert!(classify(&store, &f, &heads).is_err());
    }
}
