//! Full network: per-branch stems and blocks, interaction points between
//! block segments, and the merge stage.

use std::path::Path;

use crate::autograd::{Graph, Var};
use crate::branches::Branch;
use crate::config::PyramidConfig;
use crate::error::{Error, Result};
use crate::interaction::{build_units, interaction_point, InteractionUnit};
use crate::merging::MergeStage;
use crate::params::{Initializer, ParamGrads, ParamStore};
use crate::primitives::bilinear_resize;
use crate::tensor::{FeatureMap, Tensor};

#[derive(Debug, Clone)]
pub struct InteractionPoint {
    /// Number of blocks every branch has run before this point.
    pub after_block: usize,
    pub units: Vec<InteractionUnit>,
}

#[derive(Debug, Clone)]
pub struct PiipModel {
    pub config: PyramidConfig,
    pub branches: Vec<Branch>,
    pub points: Vec<InteractionPoint>,
    pub merge: MergeStage,
    pub store: ParamStore,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelOutput {
    Dense(FeatureMap),
    Scores(Vec<f64>),
}

/// Output together with each branch's final features.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub output: ModelOutput,
    pub branch_features: Vec<FeatureMap>,
}

/// Scalar objective over the model output (class scores when the model has
/// a classifier, otherwise the merged map).
#[derive(Debug, Clone, PartialEq)]
pub enum LossFn {
    Constant(f64),
    Sum,
    /// Inner product with a fixed direction of the output's length.
    Dot(Vec<f64>),
    /// Softmax cross-entropy against a label; needs a classifier.
    CrossEntropy(usize),
}

pub(crate) struct GraphForward {
    pub features: Vec<Var>,
    pub dense: Option<Var>,
    pub logits: Option<Var>,
}

impl GraphForward {
    fn output(&self) -> Var {
        self.logits.or(self.dense).expect("merge stage yields an output")
    }
}

impl PiipModel {
    pub fn build(config: &PyramidConfig, mut init: Initializer) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let branches = config
            .branches
            .iter()
            .enumerate()
            .map(|(j, spec)| Branch::build(&mut store, &mut init, j + 1, spec))
            .collect();
        let points = config
            .interaction_blocks()
            .into_iter()
            .enumerate()
            .map(|(i, after_block)| InteractionPoint { after_block, units: build_units(&mut store, &mut init, config, i) })
            .collect();
        let merge = MergeStage::build(&mut store, &mut init, config);
        Ok(PiipModel { config: config.clone(), branches, points, merge, store })
    }

    /// Builds with weights drawn from the config's seed.
    pub fn new(config: &PyramidConfig) -> Result<Self> {
        Self::build(config, Initializer::seeded(config.seed))
    }

    /// Builds the architecture and fills it from a saved container.
    pub fn load(config: &PyramidConfig, path: &Path) -> Result<Self> {
        let mut model = Self::build(config, Initializer::shape_only())?;
        model.store.load_values(&ParamStore::load(path)?)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn input_resolution(&self) -> usize {
        self.config.largest_resolution()
    }

    pub(crate) fn forward_graph(&self, g: &mut Graph, image: &Tensor, interactions: bool) -> Result<GraphForward> {
        let r = self.input_resolution();
        let s = image.shape();
        if s.len() != 3 || s[0] != r || s[1] != r || s[2] != 3 {
            return Err(Error::Shape(format!("expected a {r}x{r}x3 input image, got {s:?}")));
        }
        let mut feats = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let res = b.spec.resolution;
            let img = if res == r { image.clone() } else { bilinear_resize(image, res, res)? };
            let x = g.constant(img.reshape(vec![res * res, 3])?);
            feats.push(b.embed.forward(g, x, res)?);
        }
        let grids: Vec<(usize, usize)> = self.branches.iter().map(|b| (b.grid(), b.grid())).collect();
        let mut done = 0;
        for p in &self.points {
            for (f, b) in feats.iter_mut().zip(&self.branches) {
                *f = b.forward_segment(g, *f, done, p.after_block)?;
            }
            done = p.after_block;
            if interactions {
                feats = interaction_point(g, &feats, &grids, &p.units)?;
            }
        }
        for (f, b) in feats.iter_mut().zip(&self.branches) {
            *f = b.forward_segment(g, *f, done, b.blocks.len())?;
        }
        let (dense, logits) = match &self.merge {
            MergeStage::Dense { module, head } => {
                let d = module.forward(g, &feats)?;
                let l = head.as_ref().map(|h| h.forward(g, d)).transpose()?;
                (Some(d), l)
            }
            MergeStage::Classification(heads) => (None, Some(heads.forward(g, &feats)?)),
        };
        Ok(GraphForward { features: feats, dense, logits })
    }

    fn trace(&self, image: &Tensor, interactions: bool) -> Result<ForwardTrace> {
        let mut g = Graph::new(&self.store);
        let out = self.forward_graph(&mut g, image, interactions)?;
        let branch_features = out
            .features
            .iter()
            .zip(&self.branches)
            .map(|(&v, b)| FeatureMap::from_tensor(g.value(v).clone(), b.grid(), b.grid(), b.id))
            .collect::<Result<Vec<_>>>()?;
        let output = match (out.logits, out.dense) {
            (Some(l), _) => ModelOutput::Scores(g.value(l).data().to_vec()),
            (None, Some(d)) => {
                let t = self.config.branches.iter().map(|b| b.grid()).max().unwrap_or(0);
                ModelOutput::Dense(FeatureMap::from_tensor(g.value(d).clone(), t, t, 0)?)
            }
            (None, None) => unreachable!("merge stage yields an output"),
        };
        Ok(ForwardTrace { output, branch_features })
    }

    /// `image` must be `R x R x 3` with `R` the largest branch resolution.
    pub fn forward(&self, image: &Tensor) -> Result<ModelOutput> {
        Ok(self.trace(image, true)?.output)
    }

    pub fn forward_trace(&self, image: &Tensor) -> Result<ForwardTrace> {
        self.trace(image, true)
    }

    /// Same weights with every interaction point skipped.
    pub fn forward_without_interactions(&self, image: &Tensor) -> Result<ForwardTrace> {
        self.trace(image, false)
    }

    fn loss_var(&self, g: &mut Graph, image: &Tensor, loss: &LossFn) -> Result<Var> {
        let out = self.forward_graph(g, image, true)?;
        let y = out.output();
        match loss {
            LossFn::Constant(c) => Ok(g.constant(Tensor::filled(vec![1, 1], *c))),
            LossFn::Sum => Ok(g.sum(y)),
            LossFn::Dot(dir) => g.dot(y, dir.clone()),
            LossFn::CrossEntropy(label) => match out.logits {
                Some(l) => g.softmax_xent(l, *label),
                None => Err(Error::Validation("cross-entropy needs a model with class scores".into())),
            },
        }
    }

    /// Loss value only.
    pub fn loss(&self, image: &Tensor, loss: &LossFn) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let v = self.loss_var(&mut g, image, loss)?;
        let l = g.value(v).data()[0];
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss(l));
        }
        Ok(l)
    }

    /// Number of scalars in the model output for [`LossFn::Dot`] directions.
    pub fn output_len(&self) -> usize {
        match &self.merge {
            MergeStage::Dense { head: Some(h), .. } => h.classes(),
            MergeStage::Dense { module, head: None } => module.target_grid * module.target_grid * module.out_dim,
            MergeStage::Classification(c) => c.heads.first().map(|h| h.classes()).unwrap_or(0),
        }
    }
}

/// Loss and the gradient of every registered parameter.
pub fn parameter_gradients(model: &PiipModel, image: &Tensor, loss: &LossFn) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::new(&model.store);
    let v = model.loss_var(&mut g, image, loss)?;
    let l = g.value(v).data()[0];
    let grads = g.backward(v)?;
    Ok((l, grads))
}

/// Adam with decoupled weight decay; decay applies only to parameters
/// registered with the decay flag (matrices and kernels).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: ParamGrads,
    v: ParamGrads,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            step: 0,
            m: ParamGrads::zeros_like(store),
            v: ParamGrads::zeros_like(store),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let wd = if store.decays(id) { self.weight_decay } else { 0.0 };
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let v = self.v.get_mut(id).data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let (m, v) = (self.m.get(id).data(), self.v.get(id).data());
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + wd * p[i]);
            }
        }
    }
}

/// Mean loss and number of correct argmax predictions over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

/// Index of the largest score (first on ties).
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// One optimizer step on the mean cross-entropy of `batch`. The reported
/// loss and predictions are those before the update.
pub fn train_step_stats(model: &mut PiipModel, batch: &[(Tensor, usize)], opt: &mut AdamW) -> Result<StepStats> {
    if !model.merge.has_classifier() {
        return Err(Error::Validation("training needs a model with class scores (set merge.classes)".into()));
    }
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = ParamGrads::zeros_like(&model.store);
    let mut loss = 0.0;
    let mut correct = 0;
    for (image, label) in batch {
        let mut g = Graph::new(&model.store);
        let out = model.forward_graph(&mut g, image, true)?;
        let logits = out.logits.expect("classifier present");
        if argmax(g.value(logits).data()) == *label {
            correct += 1;
        }
        let l = g.softmax_xent(logits, *label)?;
        loss += g.value(l).data()[0];
        total.add_assign(&g.backward(l)?);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    opt.update(&mut model.store, &total);
    Ok(StepStats { loss: loss / n, correct })
}

/// [`train_step_stats`] returning only the loss.
pub fn train_step(model: &mut PiipModel, batch: &[(Tensor, usize)], opt: &mut AdamW) -> Result<f64> {
    Ok(train_step_stats(model, batch, opt)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, MergeMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(r: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![r, r, 3], (0..r * r * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_gates_match_interaction_free_forward() {
        let model = PiipModel::new(&preset("piip-tiny-test").unwrap()).unwrap();
        let img = image(64, 1);
        assert_eq!(model.forward_trace(&img).unwrap(), model.forward_without_interactions(&img).unwrap());
        let mut cfg0 = preset("piip-tiny-test").unwrap();
        cfg0.interactions.count = 0;
        let plain = PiipModel::new(&cfg0).unwrap();
        // Different registry, so only the branches share weights; compare features.
        let a = model.forward_trace(&img).unwrap().branch_features;
        let b = plain.forward_trace(&img).unwrap().branch_features;
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_input_size_is_an_error() {
        let model = PiipModel::new(&preset("piip-tiny-test").unwrap()).unwrap();
        assert!(matches!(model.forward(&image(32, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let model = PiipModel::new(&preset("piip-tiny-test").unwrap()).unwrap();
        let (l, g) = parameter_gradients(&model, &image(64, 2), &LossFn::Constant(3.5)).unwrap();
        assert_eq!(l, 3.5);
        for id in model.store.ids() {
            assert!(g.get(id).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut model = PiipModel::new(&preset("piip-tiny-test").unwrap()).unwrap();
        let before = model.store.clone();
        let mut opt = AdamW::new(&model.store, 0.0);
        train_step(&mut model, &[(image(64, 3), 4)], &mut opt).unwrap();
        for id in model.store.ids() {
            assert_eq!(model.store.get(id), before.get(id));
        }
    }

    #[test]
    fn gates_get_gradients_after_first_step() {
        let mut model = PiipModel::new(&preset("piip-tiny-test").unwrap()).unwrap();
        let mut opt = AdamW::new(&model.store, 1e-3);
        let batch = [(image(64, 4), 1), (image(64, 5), 7)];
        train_step(&mut model, &batch, &mut opt).unwrap();
        let (_, g) = parameter_gradients(&model, &batch[0].0, &LossFn::CrossEntropy(1)).unwrap();
        for p in &model.points {
            for u in &p.units {
                for id in u.gates() {
                    assert!(g.get(id).data().iter().any(|&v| v != 0.0), "{}", model.store.name(id));
                }
            }
        }
    }

    #[test]
    fn training_needs_a_classifier() {
        let mut cfg = preset("piip-tiny-test").unwrap();
        cfg.merge.classes = 0;
        cfg.merge.mode = MergeMode::Dense;
        let mut model = PiipModel::new(&cfg).unwrap();
        let mut opt = AdamW::new(&model.store, 1e-3);
        assert!(train_step(&mut model, &[(image(64, 3), 0)], &mut opt).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = preset("piip-tiny-test").unwrap();
        let model = PiipModel::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        model.save(&path).unwrap();
        let back = PiipModel::load(&cfg, &path).unwrap();
        let img = image(64, 9);
        assert_eq!(model.forward(&img).unwrap(), back.forward(&img).unwrap());
    }
}
