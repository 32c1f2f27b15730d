//! Information maps, temperature-controlled probability maps and seeded
//! per-pixel Bernoulli sampling.
//!
//! The entropy map is the Shannon entropy (base 2) of the quantized gray
//! histogram in an `N×N` replicate-padded window. Probabilities are
//! `clip(τ · E / log2 L, 0, 1)`. Each pixel's draw comes from
//! [`crate::rng::pixel_uniform`], so for a fixed seed the selected set grows
//! monotonically with τ.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::pixel_uniform;
use crate::scene::PosedView;
use crate::tensor_io::RawTensor;

pub const DEFAULT_WINDOW: usize = 7;
pub const DEFAULT_GRAY_LEVELS: usize = 256;
pub const DEFAULT_CALIBRATION_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    pub width: usize,
    pub height: usize,
    /// Bits, in `[0, log2 L]`.
    pub values: Vec<f64>,
    pub window: usize,
    pub gray_levels: usize,
}

impl EntropyMap {
    pub fn max_bits(&self) -> f64 {
        (self.gray_levels as f64).log2()
    }

    /// Entropy divided by its theoretical maximum `log2 L`.
    pub fn normalized(&self) -> Vec<f64> {
        let m = self.max_bits();
        self.values.iter().map(|e| e / m).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// Temperature used to build the map (the constant itself for uniform maps).
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelSampleSet {
    pub view_id: u32,
    /// `(u, v)` in row-major order.
    pub pixels: Vec<(u32, u32)>,
    pub seed: u64,
}

impl PixelSampleSet {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    Entropy,
    Random,
    Laplacian,
}

impl std::fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplingStrategy::Entropy => "entropy",
            SamplingStrategy::Random => "random",
            SamplingStrategy::Laplacian => "laplacian",
        })
    }
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(SamplingStrategy::Entropy),
            "random" => Ok(SamplingStrategy::Random),
            "laplacian" => Ok(SamplingStrategy::Laplacian),
            other => Err(Error::InvalidConfig(format!("unknown sampling strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub strategy: SamplingStrategy,
    pub window: usize,
    pub gray_levels: usize,
    pub tau: f64,
    pub seed: u64,
    /// Constant probability of the random baseline.
    pub uniform_p: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            strategy: SamplingStrategy::Entropy,
            window: DEFAULT_WINDOW,
            gray_levels: DEFAULT_GRAY_LEVELS,
            tau: 1.0,
            seed: 0,
            uniform_p: 0.1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        validate_window(self.window)?;
        validate_levels(self.gray_levels)?;
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be ≥ 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.uniform_p) {
            return Err(Error::InvalidConfig(format!("uniform_p must lie in [0, 1], got {}", self.uniform_p)));
        }
        Ok(())
    }
}

fn validate_window(n: usize) -> Result<()> {
    if n < 3 || n % 2 == 0 {
        return Err(Error::InvalidConfig(format!("window size must be odd and ≥ 3, got {n}")));
    }
    Ok(())
}

fn validate_levels(l: usize) -> Result<()> {
    if !(2..=65536).contains(&l) {
        return Err(Error::InvalidConfig(format!("gray levels must lie in 2..=65536, got {l}")));
    }
    Ok(())
}

/// Gray value to histogram bin: `floor(g·L)` clamped to `L-1`.
#[inline]
pub fn quantize(g: f64, levels: usize) -> usize {
    ((g * levels as f64).floor().max(0.0) as usize).min(levels - 1)
}

/// Local Shannon entropy over an `window×window` replicate-padded window.
pub fn local_entropy(gray: &[f64], width: usize, height: usize, window: usize, levels: usize) -> Result<EntropyMap> {
    validate_window(window)?;
    validate_levels(levels)?;
    if gray.len() != width * height {
        return Err(Error::dims("gray raster", width * height, gray.len()));
    }
    let r = (window / 2) as i64;
    let n = window * window;
    let bins: Vec<u32> = gray.iter().map(|&g| quantize(g, levels) as u32).collect();
    let clamp_x = |x: i64| x.clamp(0, width as i64 - 1) as usize;
    let clamp_y = |y: i64| y.clamp(0, height as i64 - 1) as usize;
    let scan_histogram = levels <= 4 * n;

    let mut values = vec![0.0; width * height];
    let mut hist = vec![0u32; if scan_histogram { levels } else { 0 }];
    let mut window_bins = Vec::with_capacity(n);
    for v in 0..height {
        let rows: Vec<usize> = (-r..=r).map(|dy| clamp_y(v as i64 + dy)).collect();
        if scan_histogram {
            hist.iter_mut().for_each(|c| *c = 0);
            for &row in &rows {
                for dx in -r..=r {
                    hist[bins[row * width + clamp_x(dx)] as usize] += 1;
                }
            }
        }
        for u in 0..width {
            if scan_histogram {
                if u > 0 {
                    let out_col = clamp_x(u as i64 - 1 - r);
                    let in_col = clamp_x(u as i64 + r);
                    for &row in &rows {
                        hist[bins[row * width + out_col] as usize] -= 1;
                        hist[bins[row * width + in_col] as usize] += 1;
                    }
                }
                values[v * width + u] = entropy_of_counts(hist.iter().copied(), n);
            } else {
                window_bins.clear();
                for &row in &rows {
                    for dx in -r..=r {
                        window_bins.push(bins[row * width + clamp_x(u as i64 + dx)]);
                    }
                }
                window_bins.sort_unstable();
                let runs = window_bins.chunk_by(|a, b| a == b).map(|run| run.len() as u32);
                values[v * width + u] = entropy_of_counts(runs, n);
            }
        }
    }
    Ok(EntropyMap { width, height, values, window, gray_levels: levels })
}

// Counts must arrive in ascending bin order so that every caller sums the
// same terms in the same order.
#[inline]
fn entropy_of_counts(counts: impl Iterator<Item = u32>, total: usize) -> f64 {
    let mut e = 0.0;
    for c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            e -= p * p.log2();
        }
    }
    e
}

/// `clip(τ · E / log2 L, 0, 1)`.
pub fn probability_map(entropy: &EntropyMap, tau: f64) -> Result<ProbabilityMap> {
    probability_from_information(&entropy.normalized(), entropy.width, entropy.height, tau)
}

/// `clip(τ · info, 0, 1)` for an information map already scaled to `[0, 1]`.
pub fn probability_from_information(info: &[f64], width: usize, height: usize, tau: f64) -> Result<ProbabilityMap> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be ≥ 0, got {tau}")));
    }
    if info.len() != width * height {
        return Err(Error::dims("information map", width * height, info.len()));
    }
    let values = info.iter().map(|&x| (tau * x).clamp(0.0, 1.0)).collect();
    Ok(ProbabilityMap { width, height, values, tau })
}

/// Constant probability map (the random baseline).
pub fn uniform_probability(width: usize, height: usize, p: f64) -> Result<ProbabilityMap> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("uniform probability must lie in [0, 1], got {p}")));
    }
    Ok(ProbabilityMap { width, height, values: vec![p; width * height], tau: p })
}

/// Selects pixel `(u, v)` iff it is valid and its keyed uniform draw is
/// below `P(u, v)`.
pub fn bernoulli_sample(prob: &ProbabilityMap, valid: &[bool], view_id: u32, seed: u64) -> Result<PixelSampleSet> {
    if valid.len() != prob.values.len() {
        return Err(Error::dims("validity mask", prob.values.len(), valid.len()));
    }
    let mut pixels = Vec::new();
    for v in 0..prob.height {
        for u in 0..prob.width {
            let i = v * prob.width + u;
            let p = prob.values[i];
            if valid[i] && p > 0.0 && pixel_uniform(seed, view_id, u as u32, v as u32) < p {
                pixels.push((u as u32, v as u32));
            }
        }
    }
    Ok(PixelSampleSet { view_id, pixels, seed })
}

/// Absolute 4-neighbor Laplacian response, replicate-padded, divided by its
/// maximum (an all-zero response stays zero).
pub fn laplacian_map(gray: &[f64], width: usize, height: usize) -> Result<Vec<f64>> {
    let raw = laplacian_response(gray, width, height)?;
    let max = raw.iter().cloned().fold(0.0, f64::max);
    Ok(if max > 0.0 { raw.iter().map(|x| x / max).collect() } else { raw })
}

/// Un-normalized `|∇²g|` with kernel `[[0,1,0],[1,-4,1],[0,1,0]]`.
pub fn laplacian_response(gray: &[f64], width: usize, height: usize) -> Result<Vec<f64>> {
    if gray.len() != width * height {
        return Err(Error::dims("gray raster", width * height, gray.len()));
    }
    let at = |u: i64, v: i64| {
        gray[v.clamp(0, height as i64 - 1) as usize * width + u.clamp(0, width as i64 - 1) as usize]
    };
    let mut out = Vec::with_capacity(width * height);
    for v in 0..height as i64 {
        for u in 0..width as i64 {
            let l = at(u - 1, v) + at(u + 1, v) + at(u, v - 1) + at(u, v + 1) - 4.0 * at(u, v);
            out.push(l.abs());
        }
    }
    Ok(out)
}

/// Information map in `[0, 1]` used by `strategy` for one view. The random
/// strategy uses a map of ones, so its probability equals τ.
pub fn information_map(view: &PosedView, strategy: SamplingStrategy, window: usize, levels: usize) -> Result<Vec<f64>> {
    let (w, h) = (view.width(), view.height());
    match strategy {
        SamplingStrategy::Entropy => Ok(local_entropy(&view.image.gray, w, h, window, levels)?.normalized()),
        SamplingStrategy::Laplacian => laplacian_map(&view.image.gray, w, h),
        SamplingStrategy::Random => Ok(vec![1.0; w * h]),
    }
}

/// Expected sample count `Σ_valid clip(τ · info)` over all maps.
pub fn expected_count(maps: &[(&[f64], &[bool])], tau: f64) -> f64 {
    maps.iter()
        .map(|(info, valid)| {
            info.iter()
                .zip(valid.iter())
                .filter(|(_, &ok)| ok)
                .map(|(&x, _)| (tau * x).clamp(0.0, 1.0))
                .sum::<f64>()
        })
        .sum()
}

/// Bisects τ until the expected count over all maps is within `tol`
/// (relative) of `target`.
pub fn calibrate_tau(maps: &[(&[f64], &[bool])], target: usize, tol: f64) -> Result<f64> {
    if target == 0 {
        return Ok(0.0);
    }
    let mut reachable = 0usize;
    let mut min_positive = f64::INFINITY;
    for (info, valid) in maps {
        if info.len() != valid.len() {
            return Err(Error::dims("calibration mask", info.len(), valid.len()));
        }
        for (&x, &ok) in info.iter().zip(valid.iter()) {
            if ok && x > 0.0 {
                reachable += 1;
                min_positive = min_positive.min(x);
            }
        }
    }
    if target > reachable {
        return Err(Error::Unreachable { target, reachable });
    }
    let saturating = 1.0 / min_positive;
    if target == reachable {
        return Ok(saturating);
    }
    let goal = target as f64;
    let (mut lo, mut hi) = (0.0, saturating);
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let s = expected_count(maps, mid);
        if (s - goal).abs() <= tol * goal {
            return Ok(mid);
        }
        if s < goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

/// Samples one view under `config`, returning the probability map and the
/// selected pixels.
pub fn sample_view(view: &PosedView, config: &SamplerConfig) -> Result<(ProbabilityMap, PixelSampleSet)> {
    config.validate()?;
    let (w, h) = (view.width(), view.height());
    let prob = match config.strategy {
        SamplingStrategy::Random => uniform_probability(w, h, config.uniform_p)?,
        strategy => {
            let info = information_map(view, strategy, config.window, config.gray_levels)?;
            probability_from_information(&info, w, h, config.tau)?
        }
    };
    let set = bernoulli_sample(&prob, &view.depth.valid, view.view_id, config.seed)?;
    Ok((prob, set))
}

/// Writes a map as an 8-bit grayscale PNG: byte = round(255 · clamp(x / scale, 0, 1)).
pub fn save_heatmap_png(values: &[f64], width: usize, height: usize, scale: f64, path: &Path) -> Result<()> {
    let bytes = values
        .iter()
        .map(|&x| (255.0 * (x / scale).clamp(0.0, 1.0)).round() as u8)
        .collect();
    crate::scene::io_png_gray(path, width, height, bytes)
}

/// Writes a map as an `[H, W]` f32 raw tensor.
pub fn save_map_tensor(values: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    RawTensor::f32(vec![height, width], values.iter().map(|&x| x as f32).collect()).save(path)
}
