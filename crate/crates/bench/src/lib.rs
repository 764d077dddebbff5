//! Input builders shared by the benchmarks.

use piip::interaction::DeformableCrossAttention;
use piip::{FeatureMap, Initializer, ParamStore, Tensor};

/// Deterministic pseudo-random fill in [-1, 1).
fn fill(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

pub fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::new(vec![rows, cols], fill(rows * cols, seed)).unwrap()
}

pub fn vector(n: usize, seed: u64) -> Tensor {
    Tensor::new(vec![n], fill(n, seed)).unwrap()
}

pub fn image(side: usize, seed: u64) -> Tensor {
    Tensor::new(vec![side, side, 3], fill(side * side * 3, seed)).unwrap()
}

pub fn feature_map(grid: usize, dim: usize, seed: u64) -> FeatureMap {
    FeatureMap::new(grid, grid, dim, 1, fill(grid * grid * dim, seed)).unwrap()
}

/// Deformable attention at width `dim` with ring-initialized offsets.
pub fn deform_layer(dim: usize, heads: usize, points: usize) -> (ParamStore, DeformableCrossAttention) {
    let mut store = ParamStore::new();
    let attn = DeformableCrossAttention::new(&mut store, &mut Initializer::seeded(5), "bench", dim, dim / 2, heads, points);
    (store, attn)
}
