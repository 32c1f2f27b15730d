//! Central finite-difference verification of every hand-written backward
//! pass. Each suite reports the worst relative error it saw.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gaussian::{GaussianPrimitive, SH_C0};
use crate::geometry::build_anchor_cloud;
use crate::metrics::RgbFrame;
use crate::neighborhood::SpatialIndex;
use crate::predictor::{head_backward, head_forward, init_weights, ActivationBounds, HeadConfig, HeadVariant, NeighborhoodFeatures, WeightBundle};
use crate::renderer::{render, render_backward, render_with_cache, RenderConfig};
use crate::sampling::PixelSampleSet;
use crate::scene::{generate_synthetic_scene, CameraIntrinsics, CameraPose, SyntheticSpec};
use crate::trainer::{head_loss, head_loss_and_grad, mse_loss, TrainTarget, TrainingScene};

pub const HEAD_TOLERANCE: f64 = 1e-4;
pub const RENDER_TOLERANCE: f64 = 1e-3;
pub const CHAIN_TOLERANCE: f64 = 1e-3;
pub const MSE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct FdSuite {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Description of the worst entry.
    pub worst: String,
}

impl FdSuite {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        FdSuite { name: name.into(), checked: 0, max_rel_error: 0.0, tolerance, worst: String::new() }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }

    /// Records one comparison. `floor` keeps the relative error meaningful
    /// for gradients at the scale of finite-difference noise.
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if err > self.max_rel_error || !err.is_finite() {
            self.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            self.worst = format!("{}: analytic {analytic:e}, numeric {numeric:e}", label());
        }
    }
}

fn central<F: FnMut(f64) -> f64>(x: f64, h: f64, mut f: F) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Head backward against FD on a compact config with `k` neighbors, using
/// the scalar `r · f̃` for a random `r`. Checks every input and up to
/// `max_weights` weights.
pub fn check_head(variant: HeadVariant, k: usize, max_weights: usize, seed: u64) -> Result<FdSuite> {
    let config = HeadConfig::compact(variant, 27);
    let mut weights = init_weights(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    jitter_biases(&mut weights, &mut rng);
    let w = config.width();
    let mut feats = NeighborhoodFeatures {
        center: random_vec(&mut rng, w),
        neighbors: (0..k).map(|_| random_vec(&mut rng, w)).collect(),
        offsets: (0..k).map(|_| Vector3::from_vec(random_vec(&mut rng, 3))).collect(),
    };
    let pass = head_forward(&feats, &config, &weights, true)?;
    let r = random_vec(&mut rng, pass.output.len());
    let mut grads = weights.zeros_like();
    let ig = head_backward(&pass, &config, &weights, &r, &mut grads)?;
    let objective = |f: &NeighborhoodFeatures, wb: &WeightBundle| -> f64 {
        let out = head_forward(f, &config, wb, false).expect("finite forward").output;
        out.iter().zip(&r).map(|(a, b)| a * b).sum()
    };

    let h = 1e-5;
    let floor = 1e-5;
    let mut suite = FdSuite::new(format!("head/{variant}"), HEAD_TOLERANCE);
    for i in 0..w {
        let x = feats.center[i];
        let n = central(x, h, |v| {
            feats.center[i] = v;
            objective(&feats, &weights)
        });
        feats.center[i] = x;
        suite.record(|| format!("center[{i}]"), ig.center[i], n, floor);
    }
    for j in 0..k {
        for i in 0..w {
            let x = feats.neighbors[j][i];
            let n = central(x, h, |v| {
                feats.neighbors[j][i] = v;
                objective(&feats, &weights)
            });
            feats.neighbors[j][i] = x;
            suite.record(|| format!("neighbor[{j}][{i}]"), ig.neighbors[j][i], n, floor);
        }
        for a in 0..3 {
            let x = feats.offsets[j][a];
            let n = central(x, h, |v| {
                feats.offsets[j][a] = v;
                objective(&feats, &weights)
            });
            feats.offsets[j][a] = x;
            suite.record(|| format!("offset[{j}][{a}]"), ig.offsets[j][a], n, floor);
        }
    }
    let picks = pick_weights(&weights, max_weights, &mut rng);
    for (name, idx) in picks {
        let x = weights.get(&name).expect("picked").data[idx];
        let n = central(x, h, |v| {
            weights.get_mut(&name).expect("picked").data[idx] = v;
            objective(&feats, &weights)
        });
        weights.get_mut(&name).expect("picked").data[idx] = x;
        let a = grads.get(&name).expect("same layout").data[idx];
        suite.record(|| format!("{name}[{idx}]"), a, n, floor);
    }
    Ok(suite)
}

/// Zero biases put the center's position encoding (offset 0) exactly on a
/// rectifier kink, where central differences are meaningless.
fn jitter_biases(weights: &mut WeightBundle, rng: &mut ChaCha8Rng) {
    for (name, t) in weights.iter_mut() {
        if name.ends_with(".bias") {
            t.data.iter_mut().for_each(|b| *b += rng.gen_range(-0.1..0.1));
        }
    }
}

/// Up to `max` distinct `(tensor, flat index)` pairs, excluding tensors the
/// forward pass under test never reads.
fn pick_weights(weights: &WeightBundle, max: usize, rng: &mut ChaCha8Rng) -> Vec<(String, usize)> {
    let all: Vec<(String, usize)> = weights
        .iter()
        .filter(|(n, _)| !n.starts_with("project.") && !n.starts_with("regress."))
        .flat_map(|(n, t)| (0..t.data.len()).map(move |i| (n.to_string(), i)))
        .collect();
    if all.len() <= max {
        return all;
    }
    rand::seq::index::sample(rng, all.len(), max).into_iter().map(|i| all[i].clone()).collect()
}

/// Render config without footprint discontinuities, for FD checks.
pub fn smooth_render_config() -> RenderConfig {
    RenderConfig { sigma_cutoff: 12.0, opacity_cutoff: 1e-12, ..RenderConfig::default() }
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<GaussianPrimitive> {
    (0..n)
        .map(|_| {
            let position = Vector3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(2.0..3.0));
            let mut q = [rng.gen_range(0.5..1.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            q.iter_mut().for_each(|v| *v /= nq);
            let mut sh = [[0.0; 3]; 4];
            for c in 0..3 {
                sh[0][c] = rng.gen_range(0.35..0.65) / SH_C0;
                for row in sh.iter_mut().skip(1) {
                    row[c] = rng.gen_range(-0.1..0.1);
                }
            }
            GaussianPrimitive {
                position,
                opacity: rng.gen_range(0.3..0.8),
                scale: Vector3::new(rng.gen_range(0.08..0.2), rng.gen_range(0.08..0.2), rng.gen_range(0.08..0.2)),
                rotation: q,
                sh,
            }
        })
        .collect()
}

/// Renderer backward on a random 5-primitive 16×16 scene, all parameters,
/// objective `r · color`.
pub fn check_render(seed: u64) -> Result<FdSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = CameraIntrinsics::new(20.0, 20.0, 7.5, 7.5, 16, 16)?;
    let pose = CameraPose::look_at(Vector3::new(0.1, -0.05, -0.2), Vector3::new(0.0, 0.0, 2.5), Vector3::new(0.0, -1.0, 0.0))?;
    let cfg = smooth_render_config();
    let mut prims = random_scene(&mut rng, 5);
    let frame = render_with_cache(&prims, &intr, &pose, &cfg);
    let r = random_vec(&mut rng, frame.color.len());
    let grads = render_backward(&frame, &prims, &intr, &pose, &cfg, &r)?;
    let objective = |p: &[GaussianPrimitive]| -> f64 {
        render(p, &intr, &pose, &cfg).color.iter().zip(&r).map(|(a, b)| a * b).sum()
    };
    let mut suite = FdSuite::new("render", RENDER_TOLERANCE);
    for i in 0..prims.len() {
        let analytic = grads[i].to_vec();
        for (slot, a) in analytic.iter().enumerate() {
            let x = param(&prims[i], slot);
            let h = 1e-4 * x.abs().max(0.1);
            let n = central(x, h, |v| {
                set_param(&mut prims[i], slot, v);
                objective(&prims)
            });
            set_param(&mut prims[i], slot, x);
            suite.record(|| format!("primitive {i} {}", param_name(slot)), *a, n, 1e-6);
        }
    }
    Ok(suite)
}

/// Flattened parameter order matching `GaussianGrad::to_vec`.
fn param(p: &GaussianPrimitive, slot: usize) -> f64 {
    match slot {
        0..=2 => p.position[slot],
        3 => p.opacity,
        4..=6 => p.scale[slot - 4],
        7..=10 => p.rotation[slot - 7],
        _ => p.sh[(slot - 11) / 3][(slot - 11) % 3],
    }
}

fn set_param(p: &mut GaussianPrimitive, slot: usize, v: f64) {
    match slot {
        0..=2 => p.position[slot] = v,
        3 => p.opacity = v,
        4..=6 => p.scale[slot - 4] = v,
        7..=10 => p.rotation[slot - 7] = v,
        _ => p.sh[(slot - 11) / 3][(slot - 11) % 3] = v,
    }
}

fn param_name(slot: usize) -> String {
    match slot {
        0..=2 => format!("position[{slot}]"),
        3 => "opacity".into(),
        4..=6 => format!("scale[{}]", slot - 4),
        7..=10 => format!("rotation[{}]", slot - 7),
        _ => format!("sh[{}][{}]", (slot - 11) / 3, (slot - 11) % 3),
    }
}

/// A small training scene: `anchors` sampled pixels of a `size`×`size`
/// two-view synthetic scene, neighborhoods of `k`, one target view.
pub fn toy_training_scene(size: usize, anchors: usize, k: usize, seed: u64) -> Result<TrainingScene> {
    let spec = SyntheticSpec::textured(size, size, 3, 0);
    let bundle = generate_synthetic_scene(&spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let per_view = anchors.div_ceil(bundle.views.len());
    let mut remaining = anchors;
    for view in &bundle.views {
        let valid: Vec<(u32, u32)> = (0..view.height())
            .flat_map(|v| (0..view.width()).map(move |u| (u as u32, v as u32)))
            .filter(|&(u, v)| view.depth.at(u as usize, v as usize).is_some())
            .collect();
        let take = per_view.min(remaining).min(valid.len());
        let mut picked: Vec<(u32, u32)> =
            rand::seq::index::sample(&mut rng, valid.len(), take).into_iter().map(|i| valid[i]).collect();
        picked.sort_by_key(|&(u, v)| (v, u));
        remaining -= take;
        samples.push(PixelSampleSet { view_id: view.view_id, pixels: picked, seed });
    }
    let cloud = build_anchor_cloud(&samples, &bundle)?;
    let index = SpatialIndex::build(&cloud.positions())?;
    let neighbors = (0..cloud.len()).map(|i| index.knn(i, k)).collect();
    let targets = bundle.target_views.iter().map(TrainTarget::from_target_view).collect();
    Ok(TrainingScene { bounds: ActivationBounds::for_cloud(&cloud), cloud, neighbors, targets })
}

/// Small enough that a perturbation rarely moves any of the chain's many
/// rectifier, max-pool or clamp inputs across a kink.
const CHAIN_STEP: f64 = 1e-6;

/// End-to-end chain (MSE, renderer, activations, regression, head,
/// projection) against FD on `n_weights` random weights.
pub fn check_train_chain(variant: HeadVariant, n_weights: usize, seed: u64) -> Result<FdSuite> {
    let scene = toy_training_scene(16, 30, 4, seed)?;
    let config = HeadConfig::compact(variant, 27);
    let mut weights = init_weights(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc4a1);
    jitter_biases(&mut weights, &mut rng);
    let cfg = smooth_render_config();
    let scenes = std::slice::from_ref(&scene);
    let (_, grads) = head_loss_and_grad(scenes, &config, &weights, &cfg)?;
    let all: Vec<(String, usize)> =
        weights.iter().flat_map(|(n, t)| (0..t.data.len()).map(move |i| (n.to_string(), i))).collect();
    let mut suite = FdSuite::new(format!("train-chain/{variant}"), CHAIN_TOLERANCE);
    for i in rand::seq::index::sample(&mut rng, all.len(), n_weights.min(all.len())) {
        let (name, idx) = &all[i];
        let x = weights.get(name).expect("listed").data[*idx];
        let n = central(x, CHAIN_STEP, |v| {
            weights.get_mut(name).expect("listed").data[*idx] = v;
            head_loss(scenes, &config, &weights, &cfg).expect("finite loss")
        });
        weights.get_mut(name).expect("listed").data[*idx] = x;
        let a = grads.get(name).expect("same layout").data[*idx];
        suite.record(|| format!("{name}[{idx}]"), a, n, 1e-5);
    }
    Ok(suite)
}

/// MSE gradient against FD on a random 6×5 pair.
pub fn check_mse(seed: u64) -> Result<FdSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = RgbFrame { width: 6, height: 5, data: (0..90).map(|_| rng.gen_range(0.0..1.0)).collect() };
    let b = RgbFrame { width: 6, height: 5, data: (0..90).map(|_| rng.gen_range(0.0..1.0)).collect() };
    let (_, g) = mse_loss(&a, &b)?;
    let mut suite = FdSuite::new("mse", MSE_TOLERANCE);
    for i in 0..a.data.len() {
        let x = a.data[i];
        let n = central(x, 1e-5, |v| {
            a.data[i] = v;
            mse_loss(&a, &b).expect("same dims").0
        });
        a.data[i] = x;
        suite.record(|| format!("pixel channel {i}"), g[i], n, 1e-6);
    }
    Ok(suite)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub suites: Vec<FdSuite>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(FdSuite::passed)
    }
}

/// Every suite: MSE, renderer, each head variant, and the full chain.
pub fn run_all(seed: u64) -> Result<GradcheckReport> {
    let mut suites = vec![check_mse(seed)?, check_render(seed)?];
    for v in HeadVariant::ALL {
        suites.push(check_head(v, 4, 400, seed)?);
    }
    suites.push(check_train_chain(HeadVariant::GeoAttention, 20, seed)?);
    Ok(GradcheckReport { suites })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let report = run_all(7).unwrap();
        for s in &report.suites {
            println!("{} checked {} max rel {:e} worst {}", s.name, s.checked, s.max_rel_error, s.worst);
        }
        assert!(report.all_passed());
    }
}
