//! Image-quality metrics and per-stage timing records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// PSNR reported for identical frames.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Interleaved `H×W×3` RGB frame in 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbFrame {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        RgbFrame { width, height, data }
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        crate::scene::io_png_rgb(path, self.width, self.height, self.to_rgb8())
    }

    fn check_same(&self, other: &RgbFrame, what: &str) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) || self.data.len() != other.data.len() {
            return Err(Error::dims(
                what,
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ));
        }
        Ok(())
    }
}

pub fn mse(a: &RgbFrame, b: &RgbFrame) -> Result<f64> {
    a.check_same(b, "mse")?;
    let n = a.data.len() as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)`, or [`PSNR_CAP_DB`] for identical frames.
pub fn psnr(a: &RgbFrame, b: &RgbFrame) -> Result<f64> {
    a.check_same(b, "psnr")?;
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

// Separable "valid" filtering of a single-channel plane.
fn filter_valid(plane: &[f64], width: usize, height: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let ow = width + 1 - n;
    let oh = height + 1 - n;
    let mut tmp = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, w) in k.iter().enumerate() {
                s += w * plane[y * width + x + i];
            }
            tmp[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, w) in k.iter().enumerate() {
                s += w * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    (out, ow, oh)
}

/// Window size actually used for a `width×height` frame: 11, or the largest
/// odd size that fits.
pub fn ssim_window_for(width: usize, height: usize) -> usize {
    let m = width.min(height).min(SSIM_WINDOW);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Mean structural similarity over all valid window positions, averaged
/// over the three channels (Gaussian window σ = 1.5, K1 = 0.01, K2 = 0.03,
/// dynamic range 1).
pub fn ssim(a: &RgbFrame, b: &RgbFrame) -> Result<f64> {
    a.check_same(b, "ssim")?;
    let (w, h) = (a.width, a.height);
    if w == 0 || h == 0 {
        return Err(Error::dims("ssim", "nonempty frame", "0 pixels"));
    }
    let k = gaussian_kernel(ssim_window_for(w, h), SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a.data.iter().skip(ch).step_by(3).copied().collect();
        let y: Vec<f64> = b.data.iter().skip(ch).step_by(3).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, _, _) = filter_valid(&x, w, h, &k);
        let (my, _, _) = filter_valid(&y, w, h, &k);
        let (sxx, _, _) = filter_valid(&xx, w, h, &k);
        let (syy, _, _) = filter_valid(&yy, w, h, &k);
        let (sxy, ow, oh) = filter_valid(&xy, w, h, &k);
        let mut acc = 0.0;
        for i in 0..ow * oh {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

/// Wall-clock per pipeline stage in milliseconds, with the number of work
/// items each stage processed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingBreakdown {
    pub io_ms: f64,
    pub sampling_ms: f64,
    pub knn_ms: f64,
    pub head_ms: f64,
    pub render_ms: f64,
    pub total_ms: f64,
    pub anchor_count: usize,
    pub gaussian_count: usize,
    pub knn_items: usize,
    pub head_items: usize,
    pub rendered_views: usize,
}

impl TimingBreakdown {
    pub fn stage_sum(&self) -> f64 {
        self.io_ms + self.sampling_ms + self.knn_ms + self.head_ms + self.render_ms
    }

    pub fn stages(&self) -> [(&'static str, f64); 5] {
        [
            ("io", self.io_ms),
            ("sampling", self.sampling_ms),
            ("knn", self.knn_ms),
            ("head", self.head_ms),
            ("render", self.render_ms),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = RgbFrame::filled(4, 4, [0.5, 0.5, 0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = RgbFrame::filled(4, 4, [0.6, 0.6, 0.6]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = RgbFrame::filled(3, 4, [0.6, 0.6, 0.6]);
        assert!(matches!(psnr(&a, &c), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = RgbFrame { width: 16, height: 16, data: (0..768).map(|i| (i % 17) as f64 / 16.0).collect() };
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = RgbFrame::filled(16, 16, [0.5; 3]);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        let d = RgbFrame::filled(16, 16, [0.7; 3]);
        let s = ssim(&c, &d).unwrap();
        assert!(s < 1.0 && s > 0.0);
    }

    #[test]
    fn small_frames_shrink_the_window() {
        assert_eq!(ssim_window_for(64, 64), 11);
        assert_eq!(ssim_window_for(8, 20), 7);
        assert_eq!(ssim_window_for(5, 5), 5);
        let a = RgbFrame::filled(5, 5, [0.2; 3]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}
