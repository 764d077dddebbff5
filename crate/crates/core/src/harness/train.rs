//! Toy training on the synthetic glyph task.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PyramidConfig;
use crate::error::{Error, Result};
use crate::explorer::{config_id, write_csv, Cell, Table};
use crate::harness::dataset::Dataset;
use crate::model::{argmax, train_step_stats, AdamW, ModelOutput, PiipModel};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays to zero on a cosine after linear warmup.
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    /// Metrics row interval.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { steps: 2000, batch_size: 16, lr: 3e-3, warmup: 50, weight_decay: 0.05, log_every: 100, seed: 0 }
    }
}

impl TrainOptions {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.steps - self.warmup).max(1) as f64;
        let t = (step - self.warmup) as f64 / span;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// One metrics row: mean training loss and accuracy over the preceding
/// `log_every` steps (predictions taken before each update).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub config_id: String,
    pub rows: Vec<MetricRow>,
    /// Accuracy of the final weights over the whole training set.
    pub final_train_acc: f64,
    pub seconds: f64,
}

impl TrainMetrics {
    /// Columns `config_id, step, loss, acc`.
    pub fn table(&self) -> Table {
        Table {
            columns: ["config_id", "step", "loss", "acc"].map(String::from).to_vec(),
            rows: self
                .rows
                .iter()
                .map(|r| {
                    vec![Cell::Text(self.config_id.clone()), Cell::Int(r.step as i64), Cell::Float(r.loss), Cell::Float(r.acc)]
                })
                .collect(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(&self.table(), std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    /// True when every window's mean loss is below the previous window's.
    pub fn loss_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].loss < w[0].loss)
    }
}

/// Fraction of samples whose argmax score equals the label.
pub fn evaluate(model: &PiipModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0;
    for (img, label) in &data.samples {
        match model.forward(img)? {
            ModelOutput::Scores(s) => correct += usize::from(argmax(&s) == *label),
            ModelOutput::Dense(_) => return Err(Error::Validation("model has no classifier".into())),
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains `model` in place; batches are drawn by reshuffling the dataset
/// every epoch.
pub fn train_model(model: &mut PiipModel, data: &Dataset, opts: &TrainOptions) -> Result<TrainMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if opts.batch_size == 0 || opts.log_every == 0 {
        return Err(Error::Validation("batch_size and log_every must be positive".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = AdamW::new(&model.store, opts.lr);
    opt.weight_decay = opts.weight_decay;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut rows = Vec::new();
    let (mut win_loss, mut win_correct, mut win_seen, mut win_steps) = (0.0, 0usize, 0usize, 0usize);
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data.samples[order[cursor]].clone());
            cursor += 1;
        }
        opt.lr = opts.lr_at(step);
        let stats = train_step_stats(model, &batch, &mut opt)?;
        win_loss += stats.loss;
        win_correct += stats.correct;
        win_seen += batch.len();
        win_steps += 1;
        if (step + 1) % opts.log_every == 0 || step + 1 == opts.steps {
            rows.push(MetricRow {
                step: step + 1,
                loss: win_loss / win_steps as f64,
                acc: win_correct as f64 / win_seen as f64,
            });
            (win_loss, win_correct, win_seen, win_steps) = (0.0, 0, 0, 0);
        }
    }
    let resolutions: Vec<usize> = model.config.branches.iter().map(|b| b.resolution).collect();
    Ok(TrainMetrics {
        config_id: config_id(&resolutions),
        rows,
        final_train_acc: evaluate(model, data)?,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Builds a model from `cfg` (seeded from the config) and trains it.
pub fn train_toy(cfg: &PyramidConfig, data: &Dataset, opts: &TrainOptions) -> Result<(PiipModel, TrainMetrics)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = PiipModel::new(cfg)?;
    let metrics = train_model(&mut model, data, opts)?;
    Ok((model, metrics))
}
