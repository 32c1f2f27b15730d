//! Photometric training: MSE loss, direct per-primitive optimization and
//! end-to-end head training through the renderer. Plain gradient descent.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianGrad, GaussianPrimitive, SH_COEFFS};
use crate::geometry::AnchorCloud;
use crate::metrics::{RgbFrame, PSNR_CAP_DB};
use crate::neighborhood::NeighborSet;
use crate::predictor::{
    activate_attributes, activate_backward, dual_project_backward, head_backward, head_forward, project_cloud,
    regress_attributes, regress_backward, ActivationBounds, HeadConfig, HeadPass, NeighborhoodFeatures, RawAttributes,
    WeightBundle,
};
use crate::renderer::{render, render_backward, render_with_cache, RenderConfig};
use crate::scene::{CameraIntrinsics, CameraPose, TargetView};

/// Step multipliers for primitive attributes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeScales {
    pub position: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub sh: f64,
}

impl Default for AttributeScales {
    fn default() -> Self {
        AttributeScales { position: 1.0, opacity: 1.0, scale: 1.0, rotation: 1.0, sh: 1.0 }
    }
}

/// Step multipliers for head weight groups, keyed by tensor-name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightGroupScales {
    pub projection: f64,
    pub head: f64,
    pub regress: f64,
}

impl Default for WeightGroupScales {
    fn default() -> Self {
        WeightGroupScales { projection: 1.0, head: 1.0, regress: 1.0 }
    }
}

impl WeightGroupScales {
    fn for_tensor(&self, name: &str) -> f64 {
        if name.starts_with("project.") {
            self.projection
        } else if name.starts_with("regress.") {
            self.regress
        } else {
            self.head
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Perceptual-loss mix. Only 0 is supported: the perceptual term needs a
    /// pretrained network this crate does not ship.
    pub lambda: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub attribute_scales: AttributeScales,
    pub weight_scales: WeightGroupScales,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.0,
            learning_rate: 0.05,
            steps: 100,
            seed: 0,
            attribute_scales: AttributeScales::default(),
            weight_scales: WeightGroupScales::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda != 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda = {} requested, but the perceptual loss term is not supported; lambda must be 0",
                self.lambda
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Mean squared error over all pixel channels and its gradient
/// `2(r - t)/count` with respect to `rendered`.
pub fn mse_loss(rendered: &RgbFrame, target: &RgbFrame) -> Result<(f64, Vec<f64>)> {
    if rendered.width != target.width || rendered.height != target.height {
        return Err(Error::dims(
            "mse_loss frame",
            format!("{}x{}", target.width, target.height),
            format!("{}x{}", rendered.width, rendered.height),
        ));
    }
    let n = rendered.data.len() as f64;
    let mut loss = 0.0;
    let grad = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(r, t)| {
            let d = r - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// A supervising view with a full-precision target image.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTarget {
    pub image: RgbFrame,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl TrainTarget {
    pub fn from_target_view(t: &TargetView) -> Self {
        TrainTarget { image: t.image.to_frame(), intrinsics: t.intrinsics, pose: t.pose.clone() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageTimes {
    pub forward_ms: f64,
    pub render_ms: f64,
    pub backward_ms: f64,
    pub update_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossReport {
    /// Loss before each update; one entry per step.
    pub losses: Vec<f64>,
    pub initial_psnr: f64,
    pub final_psnr: f64,
    pub final_loss: f64,
    pub stages: StageTimes,
}

impl LossReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io_err = |e| Error::Io { path: path.to_path_buf(), source: e };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        writeln!(w, "step,loss,psnr").map_err(io_err)?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(w, "{i},{l},{}", psnr_from_mse(*l)).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }
}

/// Mean loss over `targets` and the per-primitive gradient of that mean.
pub fn scene_loss_and_grad(
    prims: &[GaussianPrimitive],
    targets: &[TrainTarget],
    render_cfg: &RenderConfig,
) -> Result<(f64, Vec<GaussianGrad>)> {
    let mut total = 0.0;
    let mut grads = vec![GaussianGrad::default(); prims.len()];
    let scale = 1.0 / targets.len() as f64;
    for t in targets {
        let frame = render_with_cache(prims, &t.intrinsics, &t.pose, render_cfg);
        let (loss, mut d) = mse_loss(&frame.to_frame(), &t.image)?;
        d.iter_mut().for_each(|v| *v *= scale);
        total += loss * scale;
        for (acc, g) in grads.iter_mut().zip(render_backward(&frame, prims, &t.intrinsics, &t.pose, render_cfg, &d)?) {
            acc.add_assign(&g);
        }
    }
    Ok((total, grads))
}

/// Mean loss over `targets` without gradients.
pub fn scene_loss(prims: &[GaussianPrimitive], targets: &[TrainTarget], render_cfg: &RenderConfig) -> Result<f64> {
    let mut total = 0.0;
    for t in targets {
        let frame = render(prims, &t.intrinsics, &t.pose, render_cfg);
        total += mse_loss(&frame.to_frame(), &t.image)?.0;
    }
    Ok(total / targets.len() as f64)
}

const OPACITY_EPS: f64 = 1e-6;

/// Gradient descent directly on primitive attributes. After each step
/// quaternions are renormalized and scales and opacities re-clamped.
pub fn optimize_attributes(
    mut prims: Vec<GaussianPrimitive>,
    targets: &[TrainTarget],
    render_cfg: &RenderConfig,
    bounds: &ActivationBounds,
    cfg: &TrainConfig,
) -> Result<(Vec<GaussianPrimitive>, LossReport)> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::InvalidConfig("optimize_attributes needs at least one target view".into()));
    }
    let mut report = LossReport::default();
    let s = &cfg.attribute_scales;
    for _ in 0..cfg.steps {
        let t0 = Instant::now();
        let (loss, grads) = scene_loss_and_grad(&prims, targets, render_cfg)?;
        report.stages.backward_ms += t0.elapsed().as_secs_f64() * 1e3;
        report.losses.push(loss);
        let t1 = Instant::now();
        let lr = cfg.learning_rate;
        for (p, g) in prims.iter_mut().zip(&grads) {
            p.position -= lr * s.position * g.position;
            p.opacity = (p.opacity - lr * s.opacity * g.opacity).clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
            for a in 0..3 {
                p.scale[a] = (p.scale[a] - lr * s.scale * g.scale[a]).clamp(bounds.s_min, bounds.s_max);
            }
            for a in 0..4 {
                p.rotation[a] -= lr * s.rotation * g.rotation[a];
            }
            let n = p.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            p.rotation = if n > 0.0 { p.rotation.map(|v| v / n) } else { [1.0, 0.0, 0.0, 0.0] };
            for k in 0..SH_COEFFS {
                for c in 0..3 {
                    p.sh[k][c] -= lr * s.sh * g.sh[k][c];
                }
            }
        }
        report.stages.update_ms += t1.elapsed().as_secs_f64() * 1e3;
    }
    report.final_loss = scene_loss(&prims, targets, render_cfg)?;
    report.initial_psnr = psnr_from_mse(*report.losses.first().unwrap_or(&report.final_loss));
    report.final_psnr = psnr_from_mse(report.final_loss);
    Ok((prims, report))
}

/// Fixed inputs of head training for one scene: the anchors, their
/// neighborhoods and the supervising views.
#[derive(Debug, Clone)]
pub struct TrainingScene {
    pub cloud: AnchorCloud,
    pub neighbors: Vec<NeighborSet>,
    pub bounds: ActivationBounds,
    pub targets: Vec<TrainTarget>,
}

/// Forward state of a whole scene kept for backward.
struct SceneForward {
    passes: Vec<HeadPass>,
    raws: Vec<RawAttributes>,
    prims: Vec<GaussianPrimitive>,
}

fn scene_forward(scene: &TrainingScene, config: &HeadConfig, weights: &WeightBundle, keep: bool) -> Result<SceneForward> {
    let projected = project_cloud(&scene.cloud, config, weights)?;
    let mut passes = Vec::with_capacity(scene.neighbors.len());
    let mut raws = Vec::with_capacity(scene.neighbors.len());
    let mut prims = Vec::with_capacity(scene.neighbors.len());
    for ns in &scene.neighbors {
        let feats = NeighborhoodFeatures::from_projected(ns, &projected);
        let pass = head_forward(&feats, config, weights, keep)?;
        let raw = regress_attributes(&pass.output, weights)?;
        prims.push(activate_attributes(&raw, scene.cloud.anchors[ns.center].position, &scene.bounds));
        raws.push(raw);
        passes.push(pass);
    }
    Ok(SceneForward { passes, raws, prims })
}

/// Predicted primitives of a training scene under `weights`.
pub fn predict_scene(scene: &TrainingScene, config: &HeadConfig, weights: &WeightBundle) -> Result<Vec<GaussianPrimitive>> {
    Ok(scene_forward(scene, config, weights, false)?.prims)
}

/// Mean photometric loss of the scenes under `weights`.
pub fn head_loss(scenes: &[TrainingScene], config: &HeadConfig, weights: &WeightBundle, render_cfg: &RenderConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in scenes {
        total += scene_loss(&predict_scene(s, config, weights)?, &s.targets, render_cfg)?;
    }
    Ok(total / scenes.len() as f64)
}

/// Mean loss over scenes and its gradient with respect to every weight.
pub fn head_loss_and_grad(
    scenes: &[TrainingScene],
    config: &HeadConfig,
    weights: &WeightBundle,
    render_cfg: &RenderConfig,
) -> Result<(f64, WeightBundle)> {
    let mut grads = weights.zeros_like();
    let mut total = 0.0;
    let scale = 1.0 / scenes.len() as f64;
    for scene in scenes {
        let fwd = scene_forward(scene, config, weights, true)?;
        let (loss, prim_grads) = scene_loss_and_grad(&fwd.prims, &scene.targets, render_cfg)?;
        total += loss * scale;
        let mut d_feat = vec![vec![0.0; config.width()]; scene.cloud.len()];
        for (i, ns) in scene.neighbors.iter().enumerate() {
            let mut g = prim_grads[i];
            if g.is_zero() {
                continue;
            }
            g.opacity *= scale;
            g.scale *= scale;
            g.rotation = g.rotation.map(|v| v * scale);
            g.sh = g.sh.map(|row| row.map(|v| v * scale));
            let d_raw = activate_backward(&fwd.raws[i], &scene.bounds, &g);
            let d_agg = regress_backward(&fwd.passes[i].output, weights, &d_raw, &mut grads);
            let ig = head_backward(&fwd.passes[i], config, weights, &d_agg, &mut grads)?;
            add(&mut d_feat[ns.center], &ig.center);
            for (j, dn) in ns.indices.iter().zip(&ig.neighbors) {
                add(&mut d_feat[*j], dn);
            }
        }
        for (a, d) in scene.cloud.anchors.iter().zip(&d_feat) {
            if d.iter().any(|v| *v != 0.0) {
                dual_project_backward(&a.geo, &a.appearance, weights, d, &mut grads);
            }
        }
    }
    Ok((total, grads))
}

fn add(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Trains head weights end to end against the scenes' target views.
pub fn train_head(
    mut weights: WeightBundle,
    config: &HeadConfig,
    scenes: &[TrainingScene],
    render_cfg: &RenderConfig,
    cfg: &TrainConfig,
) -> Result<(WeightBundle, LossReport)> {
    cfg.validate()?;
    weights.validate(config)?;
    if scenes.is_empty() || scenes.iter().any(|s| s.targets.is_empty()) {
        return Err(Error::InvalidConfig("train_head needs scenes with target views".into()));
    }
    let mut report = LossReport::default();
    for _ in 0..cfg.steps {
        let t0 = Instant::now();
        let (loss, grads) = head_loss_and_grad(scenes, config, &weights, render_cfg)?;
        report.stages.backward_ms += t0.elapsed().as_secs_f64() * 1e3;
        report.losses.push(loss);
        let t1 = Instant::now();
        if cfg.learning_rate > 0.0 {
            for ((name, w), (_, g)) in weights.iter_mut().zip(grads.iter()) {
                let step = cfg.learning_rate * cfg.weight_scales.for_tensor(name);
                for (x, d) in w.data.iter_mut().zip(&g.data) {
                    *x -= step * d;
                }
            }
        }
        report.stages.update_ms += t1.elapsed().as_secs_f64() * 1e3;
    }
    report.final_loss = head_loss(scenes, config, &weights, render_cfg)?;
    report.initial_psnr = psnr_from_mse(*report.losses.first().unwrap_or(&report.final_loss));
    report.final_psnr = psnr_from_mse(report.final_loss);
    Ok((weights, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_closed_forms() {
        let a = RgbFrame::filled(4, 3, [0.5; 3]);
        let b = RgbFrame::filled(4, 3, [0.0; 3]);
        let (l, g) = mse_loss(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
        assert_eq!(mse_loss(&a, &b).unwrap().0, 0.25);
        assert!(mse_loss(&a, &RgbFrame::filled(3, 3, [0.0; 3])).is_err());
    }

    #[test]
    fn lambda_must_be_zero() {
        let cfg = TrainConfig { lambda: 0.1, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
