//! Synthetic glyph classification: a small class-specific bitmap pasted at a
//! random position over a smooth background. Only the glyph identifies the
//! class, and it is small enough that low-resolution copies blur it away.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Glyph bitmaps are drawn once from this fixed seed so every dataset of a
/// given glyph size shares the same class definitions.
const GLYPH_SEED: u64 = 0x9e37_79b9;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub canvas_size: usize,
    pub glyph_size: usize,
    pub classes: usize,
    /// Peak amplitude of the background field.
    pub background_amplitude: f64,
}

impl SyntheticTask {
    /// Glyphs one eighth of the canvas, ten classes.
    pub fn new(canvas_size: usize) -> Self {
        SyntheticTask { canvas_size, glyph_size: (canvas_size / 8).max(3), classes: 10, background_amplitude: 0.3 }
    }

    /// Class bitmaps (`glyph_size^2` values in {0, 1}), pairwise differing in
    /// at least a quarter of their pixels.
    pub fn glyphs(&self) -> Vec<Vec<f64>> {
        let n = self.glyph_size * self.glyph_size;
        let min_dist = n / 4;
        let mut rng = ChaCha8Rng::seed_from_u64(GLYPH_SEED ^ self.glyph_size as u64);
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.classes);
        while out.len() < self.classes {
            let g: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let far = out.iter().all(|o| o.iter().zip(&g).filter(|(a, b)| a != b).count() >= min_dist);
            if far {
                out.push(g);
            }
        }
        out
    }

    fn background(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = self.canvas_size;
        let mut field = vec![0.0; s * s * 3];
        for ch in 0..3 {
            for _ in 0..3 {
                let fx = rng.gen_range(0.0..1.5);
                let fy = rng.gen_range(0.0..1.5);
                let phase = rng.gen_range(0.0..2.0 * PI);
                let amp = self.background_amplitude / 3.0 * rng.gen_range(0.5..1.0);
                for y in 0..s {
                    for x in 0..s {
                        let arg = 2.0 * PI * (fx * x as f64 + fy * y as f64) / s as f64 + phase;
                        field[(y * s + x) * 3 + ch] += amp * arg.sin();
                    }
                }
            }
        }
        field
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `canvas x canvas x 3` images with their labels.
    pub samples: Vec<(Tensor, usize)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `n` labelled images, classes assigned round-robin; deterministic in `seed`.
pub fn make_dataset(task: &SyntheticTask, n: usize, seed: u64) -> Result<Dataset> {
    if task.glyph_size > task.canvas_size || task.classes == 0 {
        return Err(Error::Validation("glyph must fit the canvas and there must be at least one class".into()));
    }
    let glyphs = task.glyphs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, gs) = (task.canvas_size, task.glyph_size);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % task.classes;
        let mut img = task.background(&mut rng);
        let oy = rng.gen_range(0..=s - gs);
        let ox = rng.gen_range(0..=s - gs);
        for y in 0..gs {
            for x in 0..gs {
                if glyphs[label][y * gs + x] > 0.0 {
                    for ch in 0..3 {
                        img[((oy + y) * s + ox + x) * 3 + ch] = 1.0;
                    }
                }
            }
        }
        samples.push((Tensor::new(vec![s, s, 3], img)?, label));
    }
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_labelled() {
        let task = SyntheticTask::new(32);
        let a = make_dataset(&task, 20, 5).unwrap();
        assert_eq!(a, make_dataset(&task, 20, 5).unwrap());
        assert_ne!(a, make_dataset(&task, 20, 6).unwrap());
        assert!(a.samples.iter().enumerate().all(|(i, (_, l))| *l == i % 10));
        assert!(make_dataset(&task, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn glyphs_are_distinct() {
        let g = SyntheticTask::new(64).glyphs();
        assert_eq!(g.len(), 10);
        for i in 0..g.len() {
            for j in 0..i {
                assert_ne!(g[i], g[j]);
            }
        }
    }
}
