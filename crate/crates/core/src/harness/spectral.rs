//! Radial power spectrum of a feature map.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Normalized radial frequency above which energy counts as high-frequency
/// (half the Nyquist frequency of 0.5 cycles per token).
pub const HIGH_CUTOFF: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralProfile {
    /// Power per radial bin; bin `i` covers normalized radii
    /// `[i, i + 1) / min(h, w)`, so the last bins hold the diagonal corners.
    pub radial: Vec<f64>,
    /// Share of total power at radius > [`HIGH_CUTOFF`]; 0 for a zero map.
    pub high_fraction: f64,
}

/// 2-D DFT power of the channel-averaged map, binned by radius.
pub fn spectral_profile(feature: &FeatureMap) -> Result<SpectralProfile> {
    let (h, w, c) = (feature.grid_h, feature.grid_w, feature.dim);
    if h < 4 || w < 4 {
        return Err(Error::Shape(format!("spectral profile needs a grid of at least 4x4, got {h}x{w}")));
    }
    let mut buf: Vec<Complex<f64>> = feature
        .data()
        .chunks(c)
        .map(|px| Complex::new(px.iter().sum::<f64>() / c as f64, 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    let scale = h.min(w) as f64;
    let nbins = (0.5f64.hypot(0.5) * scale).floor() as usize + 1;
    let mut radial = vec![0.0; nbins];
    let (mut total, mut high) = (0.0, 0.0);
    for y in 0..h {
        let fy = y.min(h - y) as f64 / h as f64;
        for x in 0..w {
            let fx = x.min(w - x) as f64 / w as f64;
            let r = fx.hypot(fy);
            let p = buf[y * w + x].norm_sqr();
            radial[((r * scale).floor() as usize).min(nbins - 1)] += p;
            total += p;
            if r > HIGH_CUTOFF {
                high += p;
            }
        }
    }
    let high_fraction = if total > 0.0 { high / total } else { 0.0 };
    Ok(SpectralProfile { radial, high_fraction })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_checkerboard() {
        let m = FeatureMap::new(8, 8, 3, 1, vec![0.7; 8 * 8 * 3]).unwrap();
        let p = spectral_profile(&m).unwrap();
        assert_eq!(p.high_fraction, 0.0);
        assert!(p.radial[1..].iter().all(|&v| v < 1e-20));
        let data = (0..8 * 8).flat_map(|i| {
            let v = if (i / 8 + i % 8) % 2 == 0 { 1.0 } else { -1.0 };
            [v, v]
        });
        let m = FeatureMap::new(8, 8, 2, 1, data.collect()).unwrap();
        assert!((spectral_profile(&m).unwrap().high_fraction - 1.0).abs() < 1e-12);
        assert!(spectral_profile(&FeatureMap::zeros(3, 8, 1, 1)).is_err());
    }
}
