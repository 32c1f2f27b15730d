//! End-to-end orchestration: sampling, back-projection, neighborhoods,
//! attribute prediction and optional rendering, with per-stage timing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianPrimitive;
use crate::geometry::{build_anchor_cloud, AnchorCloud};
use crate::metrics::{psnr, ssim, TimingBreakdown};
use crate::neighborhood::{NeighborSet, SpatialIndex, DEFAULT_K};
use crate::predictor::{
    init_weights, load_weights, predict_gaussians, ActivationBounds, HeadConfig, HeadVariant, WeightBundle,
};
use crate::renderer::{render, RenderConfig};
use crate::sampling::{
    bernoulli_sample, calibrate_tau, information_map, probability_from_information, sample_view, PixelSampleSet, ProbabilityMap,
    SamplerConfig, SamplingStrategy,
};
use crate::scene::SceneBundle;
use crate::trainer::{TrainConfig, TrainTarget, TrainingScene};

pub const CONFIG_VERSION: u32 = 1;
/// Relative tolerance of budget calibration.
pub const DEFAULT_BUDGET_TOLERANCE: f64 = 0.02;

/// Which architecture preset a config refers to when fields are omitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadPreset {
    Full,
    Compact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputPaths {
    pub ply: Option<PathBuf>,
    pub anchors: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for OutputPaths {
    fn default() -> Self {
        OutputPaths { ply: None, anchors: None, report: None }
    }
}

/// Every knob of a run. Serialized as TOML; relative paths resolve against
/// the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub version: u32,
    pub sampler: SamplerConfig,
    pub k: usize,
    /// Target primitive count; when set, τ is calibrated to hit it.
    pub budget: Option<usize>,
    pub budget_tolerance: f64,
    pub head: HeadConfig,
    pub weights: Option<PathBuf>,
    pub init_seed: u64,
    pub render: RenderConfig,
    pub train: TrainConfig,
    pub output: OutputPaths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            sampler: SamplerConfig::default(),
            k: DEFAULT_K,
            budget: None,
            budget_tolerance: DEFAULT_BUDGET_TOLERANCE,
            head: HeadConfig::full(HeadVariant::GeoAttention, 0),
            weights: None,
            init_seed: 0,
            render: RenderConfig::default(),
            train: TrainConfig::default(),
            output: OutputPaths::default(),
        }
    }
}

impl PipelineConfig {
    /// Head preset with `d_v` left to be filled from the scene.
    pub fn with_head_preset(mut self, variant: HeadVariant, preset: HeadPreset) -> Self {
        self.head = match preset {
            HeadPreset::Full => HeadConfig::full(variant, 0),
            HeadPreset::Compact => HeadConfig::compact(variant, 0),
        };
        self
    }

    /// Fails only for values TOML cannot hold, such as seeds above `i64::MAX`.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("config cannot be written as TOML: {e}")))
    }

    pub fn from_toml(text: &str, context: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::MalformedHeader { context: context.into(), reason: e.to_string() })?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::MalformedHeader {
                context: context.into(),
                reason: format!("config version {} is not supported (expected {CONFIG_VERSION})", cfg.version),
            });
        }
        Ok(cfg)
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut cfg.weights);
        fix(&mut cfg.output.ply);
        fix(&mut cfg.output.anchors);
        fix(&mut cfg.output.report);
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.render.validate()?;
        self.train.validate()?;
        if !(self.budget_tolerance > 0.0 && self.budget_tolerance < 1.0) {
            return Err(Error::InvalidConfig(format!("budget_tolerance must lie in (0, 1), got {}", self.budget_tolerance)));
        }
        Ok(())
    }

    /// The head config with `d_v` taken from the bundle when unset.
    pub fn head_for(&self, bundle: &SceneBundle) -> Result<HeadConfig> {
        let channels = bundle.feature_channels()?;
        let mut head = self.head.clone();
        if head.d_v == 0 {
            head.d_v = channels;
        } else if head.d_v != channels {
            return Err(Error::dims("head d_v versus scene feature channels", head.d_v, channels));
        }
        head.validate()?;
        Ok(head)
    }

    /// Loads the configured weights or initializes them from `init_seed`.
    pub fn weights_for(&self, head: &HeadConfig) -> Result<WeightBundle> {
        match &self.weights {
            Some(p) => load_weights(p, head),
            None => init_weights(head, self.init_seed),
        }
    }
}

/// Output of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub gaussians: Vec<GaussianPrimitive>,
    pub cloud: AnchorCloud,
    pub samples: Vec<PixelSampleSet>,
    /// τ actually used (calibrated in budget mode).
    pub tau: f64,
    pub timing: TimingBreakdown,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Per-view samples with the probability maps they were drawn from.
#[derive(Debug, Clone)]
pub struct SampledBundle {
    pub sets: Vec<PixelSampleSet>,
    pub probabilities: Vec<ProbabilityMap>,
    /// τ actually used; for the random strategy without a budget, the
    /// uniform probability.
    pub tau: f64,
}

/// Samples every view, either at the configured τ or at the τ calibrated to
/// `budget`.
pub fn sample_bundle(bundle: &SceneBundle, sampler: &SamplerConfig, budget: Option<usize>, tol: f64) -> Result<SampledBundle> {
    sampler.validate()?;
    let mut sets = Vec::with_capacity(bundle.views.len());
    let mut probabilities = Vec::with_capacity(bundle.views.len());
    let Some(target) = budget else {
        for view in &bundle.views {
            let (p, s) = sample_view(view, sampler)?;
            probabilities.push(p);
            sets.push(s);
        }
        let tau = if sampler.strategy == SamplingStrategy::Random { sampler.uniform_p } else { sampler.tau };
        return Ok(SampledBundle { sets, probabilities, tau });
    };
    let infos = bundle
        .views
        .iter()
        .map(|v| information_map(v, sampler.strategy, sampler.window, sampler.gray_levels))
        .collect::<Result<Vec<_>>>()?;
    let maps: Vec<(&[f64], &[bool])> =
        infos.iter().zip(&bundle.views).map(|(i, v)| (i.as_slice(), v.depth.valid.as_slice())).collect();
    let tau = calibrate_tau(&maps, target, tol)?;
    for (info, view) in infos.iter().zip(&bundle.views) {
        let prob = probability_from_information(info, view.width(), view.height(), tau)?;
        sets.push(bernoulli_sample(&prob, &view.depth.valid, view.view_id, sampler.seed)?);
        probabilities.push(prob);
    }
    Ok(SampledBundle { sets, probabilities, tau })
}

/// K nearest neighbors of every anchor, in anchor order.
pub fn neighborhoods(cloud: &AnchorCloud, k: usize) -> Result<Vec<NeighborSet>> {
    if cloud.is_empty() {
        return Ok(Vec::new());
    }
    let index = SpatialIndex::build(&cloud.positions())?;
    Ok((0..cloud.len()).map(|i| index.knn(i, k)).collect())
}

/// Sampling, back-projection, neighborhoods, prediction. `weights` must
/// match `config.head_for(bundle)`.
pub fn run_pipeline_with_weights(bundle: &SceneBundle, config: &PipelineConfig, head: &HeadConfig, weights: &WeightBundle) -> Result<PipelineOutput> {
    let start = Instant::now();
    let mut timing = TimingBreakdown::default();

    let t = Instant::now();
    let sampled = sample_bundle(bundle, &config.sampler, config.budget, config.budget_tolerance)?;
    let cloud = build_anchor_cloud(&sampled.sets, bundle)?;
    timing.sampling_ms = ms(t);
    timing.anchor_count = cloud.len();

    let t = Instant::now();
    let neighbor_sets = neighborhoods(&cloud, config.k)?;
    timing.knn_ms = ms(t);
    timing.knn_items = neighbor_sets.len();

    let t = Instant::now();
    let bounds = ActivationBounds::for_cloud(&cloud);
    let gaussians = predict_gaussians(&cloud, &neighbor_sets, head, weights, &bounds)?;
    timing.head_ms = ms(t);
    timing.head_items = gaussians.len();
    timing.gaussian_count = gaussians.len();

    timing.total_ms = ms(start);
    Ok(PipelineOutput { gaussians, cloud, samples: sampled.sets, tau: sampled.tau, timing })
}

/// Resolves the head, loads or initializes weights, and runs the pipeline.
pub fn run_pipeline(bundle: &SceneBundle, config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let start = Instant::now();
    let t = Instant::now();
    let head = config.head_for(bundle)?;
    let weights = config.weights_for(&head)?;
    let io_ms = ms(t);
    let mut out = run_pipeline_with_weights(bundle, config, &head, &weights)?;
    out.timing.io_ms = io_ms;
    out.timing.total_ms = ms(start);
    Ok(out)
}

/// Runs the pipeline and renders every evaluation view, timing each stage.
pub fn measure_pipeline(bundle: &SceneBundle, config: &PipelineConfig) -> Result<TimingBreakdown> {
    let start = Instant::now();
    let mut out = run_pipeline(bundle, config)?;
    let t = Instant::now();
    let views = bundle.evaluation_views();
    for v in &views {
        let frame = render(&out.gaussians, &v.intrinsics, &v.pose, &config.render);
        std::hint::black_box(&frame);
    }
    out.timing.render_ms = ms(t);
    out.timing.rendered_views = views.len();
    out.timing.total_ms = ms(start);
    Ok(out.timing)
}

/// Non-learned primitives used to compare sampling strategies. Each anchor
/// takes its pixel color and an isotropic radius equal to the world-space
/// footprint of the pixels it stands for: a sample drawn with probability P
/// represents 1/P pixels of its view, shared among the bundle's views.
pub fn direct_gaussians(cloud: &AnchorCloud, sampled: &SampledBundle, bundle: &SceneBundle, opacity: f64) -> Result<Vec<GaussianPrimitive>> {
    let bounds = ActivationBounds::for_cloud(cloud);
    let views = bundle.views.len() as f64;
    cloud
        .anchors
        .iter()
        .map(|a| {
            let vi = bundle
                .views
                .iter()
                .position(|v| v.view_id == a.source_view)
                .ok_or_else(|| Error::InvalidConfig(format!("anchor refers to unknown view {}", a.source_view)))?;
            let view = &bundle.views[vi];
            let (u, v) = (a.pixel.0 as usize, a.pixel.1 as usize);
            let p = sampled.probabilities[vi].values[v * view.width() + u];
            let z = view.pose.world_to_camera_point(&a.position).z;
            let pixel = z / (0.5 * (view.intrinsics.fx + view.intrinsics.fy));
            let radius = DIRECT_RADIUS_FACTOR * pixel / (p * views).sqrt();
            Ok(GaussianPrimitive::isotropic(a.position, radius.clamp(bounds.s_min, bounds.s_max), opacity, view.image.pixel(u, v)))
        })
        .collect()
}

/// Mean PSNR and SSIM of `gaussians` over the bundle's evaluation views.
pub fn evaluate(gaussians: &[GaussianPrimitive], bundle: &SceneBundle, render_cfg: &RenderConfig) -> Result<(f64, f64)> {
    let views = bundle.evaluation_views();
    let (mut p, mut s) = (0.0, 0.0);
    for v in &views {
        let frame = render(gaussians, &v.intrinsics, &v.pose, render_cfg).to_frame();
        let target = v.image.to_frame();
        p += psnr(&frame, &target)?;
        s += ssim(&frame, &target)?;
    }
    let n = views.len() as f64;
    Ok((p / n, s / n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub strategy: SamplingStrategy,
    pub tau: f64,
    pub primitives: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Opacity of the direct initializer used by the sampling ablation.
pub const ABLATION_OPACITY: f64 = 0.95;
/// Radius of a direct primitive relative to its pixel footprint.
pub const DIRECT_RADIUS_FACTOR: f64 = 1.0;

/// Compares sampling strategies at an equal expected primitive budget. Each
/// strategy's τ is calibrated to `budget`, primitives come from
/// [`direct_gaussians`], and quality is measured on the evaluation views.
pub fn sample_ablation(bundle: &SceneBundle, sampler: &SamplerConfig, budget: usize, render_cfg: &RenderConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for strategy in [SamplingStrategy::Entropy, SamplingStrategy::Laplacian, SamplingStrategy::Random] {
        let s = SamplerConfig { strategy, ..sampler.clone() };
        let sampled = sample_bundle(bundle, &s, Some(budget), DEFAULT_BUDGET_TOLERANCE)?;
        let cloud = build_anchor_cloud(&sampled.sets, bundle)?;
        let gaussians = direct_gaussians(&cloud, &sampled, bundle, ABLATION_OPACITY)?;
        let (p, q) = evaluate(&gaussians, bundle, render_cfg)?;
        rows.push(AblationRow { strategy, tau: sampled.tau, primitives: gaussians.len(), psnr: p, ssim: q });
    }
    Ok(rows)
}

/// Fixed training inputs for a bundle: sampled anchors, neighborhoods and
/// the bundle's target views.
pub fn prepare_training_scene(bundle: &SceneBundle, config: &PipelineConfig) -> Result<TrainingScene> {
    if bundle.target_views.is_empty() {
        return Err(Error::InvalidConfig("training needs a bundle with target views".into()));
    }
    let sampled = sample_bundle(bundle, &config.sampler, config.budget, config.budget_tolerance)?;
    let cloud = build_anchor_cloud(&sampled.sets, bundle)?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let neighbors = neighborhoods(&cloud, config.k)?;
    let targets = bundle.target_views.iter().map(TrainTarget::from_target_view).collect();
    Ok(TrainingScene { bounds: ActivationBounds::for_cloud(&cloud), cloud, neighbors, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic_scene, SyntheticSpec};

    #[test]
    fn config_round_trip() {
        let mut cfg = PipelineConfig::default().with_head_preset(HeadVariant::PointNet, HeadPreset::Compact);
        cfg.budget = Some(1234);
        cfg.weights = Some(PathBuf::from("w.sptb"));
        let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap(), "test").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn zero_tau_gives_empty_cloud() {
        let bundle = generate_synthetic_scene(&SyntheticSpec::textured(32, 24, 2, 0), 1).unwrap();
        let mut cfg = PipelineConfig::default().with_head_preset(HeadVariant::Mlp, HeadPreset::Compact);
        cfg.sampler.tau = 0.0;
        let out = run_pipeline(&bundle, &cfg).unwrap();
        assert!(out.gaussians.is_empty());
        assert_eq!(out.timing.knn_items, 0);
        assert_eq!(out.timing.head_items, 0);
    }
}
