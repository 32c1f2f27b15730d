//! Command-line front end. Every subcommand reads an optional TOML config
//! (`--config`) and applies its flags on top.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaussian::GaussianPrimitive;
use crate::gradcheck;
use crate::metrics::{psnr, ssim, TimingBreakdown};
use crate::neighborhood::{brute_force_knn, SpatialIndex};
use crate::pipeline::{
    measure_pipeline, prepare_training_scene, run_pipeline, sample_ablation, AblationRow, HeadPreset,
    PipelineConfig,
};
use crate::ply::{export_ply, parse_ply};
use crate::predictor::{init_weights, save_weights, HeadConfig, HeadVariant};
use crate::renderer::render;
use crate::sampling::{local_entropy, probability_map, save_heatmap_png, save_map_tensor, SamplingStrategy};
use crate::scene::{generate_synthetic_scene, load_scene_bundle, save_scene_bundle, SceneBundle, SyntheticSpec, TargetView};
use crate::trainer::train_head;

#[derive(Debug, Parser)]
#[command(name = "entropy-splat", version, about = "Entropy-guided sparse Gaussian scene construction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for sampling, weight initialization and synthetic scenes.
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SamplingFlags {
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<SamplingStrategy>,
    /// Target primitive count; calibrates τ.
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct HeadFlags {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_parser = parse_variant)]
    pub head: Option<HeadVariant>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Full,
    Compact,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScenePreset {
    Textured,
    FlatWall,
    HalfTextured,
    SpherePair,
    TiltedPlane,
}

fn parse_strategy(s: &str) -> std::result::Result<SamplingStrategy, String> {
    s.parse::<SamplingStrategy>().map_err(|e| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<HeadVariant, String> {
    s.parse::<HeadVariant>().map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene bundle.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "textured")]
        preset: ScenePreset,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 96)]
        height: usize,
        #[arg(long, default_value_t = 4)]
        views: usize,
        #[arg(long, default_value_t = 0)]
        variant: u32,
    },
    /// Write entropy and probability heatmaps for every view.
    Entropy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: SamplingFlags,
    },
    /// Run the pipeline and export the primitives as PLY.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the anchor cloud as `x y z` lines.
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingFlags,
        #[command(flatten)]
        head: HeadFlags,
    },
    /// Render a PLY (or a freshly generated cloud) from a bundle camera.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        ply: Option<PathBuf>,
        /// Input view id to render from.
        #[arg(long, conflicts_with = "target")]
        view: Option<u32>,
        /// Target view index to render from (default 0).
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        depth_out: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingFlags,
        #[command(flatten)]
        head: HeadFlags,
    },
    /// PSNR/SSIM against the evaluation views, as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        ply: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingFlags,
        #[command(flatten)]
        head: HeadFlags,
    },
    /// Entropy versus Laplacian versus random sampling at equal budget.
    SampleAblate {
        #[command(flatten)]
        common: Common,
        /// Bundle to evaluate; synthetic textured scenes otherwise.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        scenes: u32,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 96)]
        height: usize,
        #[arg(long, default_value_t = 4)]
        views: usize,
        #[arg(long, default_value_t = 4000)]
        budget: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build and query the kd-tree on random points, checked against brute force.
    KnnBench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20000)]
        points: usize,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 2000)]
        queries: usize,
        /// Queries re-run by brute force for verification.
        #[arg(long, default_value_t = 100)]
        verify: usize,
    },
    /// Finite-difference verification of every analytic gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train a head on a small synthetic scene.
    TrainToy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        views: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        sampling: SamplingFlags,
        #[command(flatten)]
        head: HeadFlags,
        #[arg(long)]
        weights_out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-stage timings at several τ, as JSON.
    Timings {
        #[command(flatten)]
        common: Common,
        /// Bundle to time; a synthetic textured scene otherwise.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1.0")]
        taus: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        head: HeadFlags,
    },
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.sampler.seed = s;
            cfg.init_seed = s;
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    fn seed(&self, cfg: &PipelineConfig) -> u64 {
        self.seed.unwrap_or(cfg.sampler.seed)
    }
}

impl SamplingFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(t) = self.tau {
            cfg.sampler.tau = t;
            cfg.budget = None;
        }
        if let Some(w) = self.window {
            cfg.sampler.window = w;
        }
        if let Some(l) = self.levels {
            cfg.sampler.gray_levels = l;
        }
        if let Some(s) = self.strategy {
            cfg.sampler.strategy = s;
        }
        if let Some(b) = self.budget {
            cfg.budget = Some(b);
        }
    }
}

impl HeadFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if self.head.is_some() || self.preset.is_some() {
            let variant = self.head.unwrap_or(cfg.head.variant);
            let preset = match self.preset {
                Some(PresetArg::Compact) => HeadPreset::Compact,
                _ => HeadPreset::Full,
            };
            let d_v = cfg.head.d_v;
            *cfg = cfg.clone().with_head_preset(variant, preset);
            cfg.head.d_v = d_v;
        }
        if let Some(w) = &self.weights {
            cfg.weights = Some(w.clone());
        }
    }
}

fn print_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    match out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Error::Io { path: p.to_path_buf(), source: e }),
        None => {
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

/// Primitives from a PLY if given, else from a pipeline run.
fn load_or_generate(ply: Option<&Path>, bundle: &SceneBundle, cfg: &PipelineConfig) -> Result<(Vec<GaussianPrimitive>, TimingBreakdown)> {
    match ply {
        Some(p) => {
            let t = Instant::now();
            let g = parse_ply(p)?;
            let timing = TimingBreakdown {
                io_ms: t.elapsed().as_secs_f64() * 1e3,
                gaussian_count: g.len(),
                ..Default::default()
            };
            Ok((g, timing))
        }
        None => {
            let out = run_pipeline(bundle, cfg)?;
            Ok((out.gaussians, out.timing))
        }
    }
}

fn synth_spec(preset: ScenePreset, width: usize, height: usize, views: usize, variant: u32, window: usize) -> SyntheticSpec {
    match preset {
        ScenePreset::Textured => SyntheticSpec::textured(width, height, views, variant),
        ScenePreset::FlatWall => SyntheticSpec::flat_wall(width, height),
        ScenePreset::HalfTextured => SyntheticSpec::half_textured(width, height, window),
        ScenePreset::SpherePair => SyntheticSpec::sphere_pair(width, height),
        ScenePreset::TiltedPlane => SyntheticSpec::tilted_plane(width, height),
    }
}

#[derive(Serialize)]
struct ViewScore {
    psnr: f64,
    ssim: f64,
}

#[derive(Serialize)]
struct EvalReport {
    gaussian_count: usize,
    mean_psnr: f64,
    mean_ssim: f64,
    views: Vec<ViewScore>,
    timing: TimingBreakdown,
}

#[derive(Serialize)]
struct AblationScene {
    scene: String,
    rows: Vec<AblationRow>,
}

#[derive(Serialize)]
struct AblationReport {
    budget: usize,
    scenes: Vec<AblationScene>,
    mean_psnr: Vec<(SamplingStrategy, f64)>,
    entropy_at_least_random: bool,
}

#[derive(Serialize)]
struct KnnReport {
    points: usize,
    k: usize,
    queries: usize,
    build_ms: f64,
    query_ms: f64,
    verified: usize,
    mismatches: usize,
}

#[derive(Serialize)]
struct TauTiming {
    tau: f64,
    timing: TimingBreakdown,
}

/// Runs one parsed command. `Ok(false)` means the command ran but its check
/// failed (gradcheck, knn-bench verification).
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { common, out, preset, width, height, views, variant } => {
            let cfg = common.load()?;
            let spec = synth_spec(preset, width, height, views, variant, cfg.sampler.window);
            let bundle = generate_synthetic_scene(&spec, common.seed(&cfg))?;
            save_scene_bundle(&bundle, &out)?;
            println!("wrote {} views and {} target views to {}", bundle.views.len(), bundle.target_views.len(), out.display());
        }
        Command::Entropy { common, bundle, out, sampling } => {
            let mut cfg = common.load()?;
            sampling.apply(&mut cfg);
            cfg.sampler.validate()?;
            let bundle = load_scene_bundle(&bundle)?;
            create_dir(&out)?;
            for view in &bundle.views {
                let (w, h) = (view.width(), view.height());
                let e = local_entropy(&view.image.gray, w, h, cfg.sampler.window, cfg.sampler.gray_levels)?;
                let p = probability_map(&e, cfg.sampler.tau)?;
                let id = view.view_id;
                save_heatmap_png(&e.values, w, h, e.max_bits(), &out.join(format!("entropy_{id}.png")))?;
                save_heatmap_png(&p.values, w, h, 1.0, &out.join(format!("probability_{id}.png")))?;
                save_map_tensor(&e.values, w, h, &out.join(format!("entropy_{id}.sptn")))?;
                save_map_tensor(&p.values, w, h, &out.join(format!("probability_{id}.sptn")))?;
                let expected: f64 = p.values.iter().zip(&view.depth.valid).filter(|(_, v)| **v).map(|(p, _)| p).sum();
                println!("view {id}: max entropy {:.3} bits, expected samples {expected:.1}", e.values.iter().cloned().fold(0.0, f64::max));
            }
        }
        Command::Generate { common, bundle, out, anchors, sampling, head } => {
            let mut cfg = common.load()?;
            sampling.apply(&mut cfg);
            head.apply(&mut cfg);
            let out = out.or(cfg.output.ply.clone()).ok_or_else(|| Error::InvalidConfig("--out is required".into()))?;
            let bundle = load_scene_bundle(&bundle)?;
            let result = run_pipeline(&bundle, &cfg)?;
            println!("{} anchors, {} primitives at tau {:.4}", result.cloud.len(), result.gaussians.len(), result.tau);
            if let Some(a) = anchors.or(cfg.output.anchors.clone()) {
                result.cloud.write_xyz(&a)?;
            }
            export_ply(&result.gaussians, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Render { common, bundle, ply, view, target, out, depth_out, sampling, head } => {
            let mut cfg = common.load()?;
            sampling.apply(&mut cfg);
            head.apply(&mut cfg);
            let bundle = load_scene_bundle(&bundle)?;
            let camera = match view {
                Some(id) => TargetView::from_view(
                    bundle.view(id).ok_or_else(|| Error::InvalidConfig(format!("--view {id}: no such view")))?,
                ),
                None => {
                    let views = bundle.evaluation_views();
                    let i = target.unwrap_or(0);
                    views
                        .get(i)
                        .cloned()
                        .ok_or_else(|| Error::InvalidConfig(format!("--target {i}: bundle has {} evaluation views", views.len())))?
                }
            };
            let (gaussians, _) = load_or_generate(ply.as_deref(), &bundle, &cfg)?;
            let frame = render(&gaussians, &camera.intrinsics, &camera.pose, &cfg.render);
            frame.to_frame().save_png(&out)?;
            if let Some(d) = depth_out {
                let max = frame.depth.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
                save_heatmap_png(&frame.depth, frame.width, frame.height, max, &d)?;
            }
            println!("rendered {} primitives to {}", gaussians.len(), out.display());
        }
        Command::Eval { common, bundle, ply, out, sampling, head } => {
            let mut cfg = common.load()?;
            sampling.apply(&mut cfg);
            head.apply(&mut cfg);
            let out = out.or(cfg.output.report.clone());
            let bundle = load_scene_bundle(&bundle)?;
            let (gaussians, mut timing) = load_or_generate(ply.as_deref(), &bundle, &cfg)?;
            let t = Instant::now();
            let mut views = Vec::new();
            for v in bundle.evaluation_views() {
                let frame = render(&gaussians, &v.intrinsics, &v.pose, &cfg.render).to_frame();
                let target = v.image.to_frame();
                views.push(ViewScore { psnr: psnr(&frame, &target)?, ssim: ssim(&frame, &target)? });
            }
            timing.render_ms = t.elapsed().as_secs_f64() * 1e3;
            timing.rendered_views = views.len();
            timing.total_ms = timing.stage_sum();
            let n = views.len() as f64;
            let report = EvalReport {
                gaussian_count: gaussians.len(),
                mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
                mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
                views,
                timing,
            };
            print_json(&report, out.as_deref())?;
        }
        Command::SampleAblate { common, bundle, scenes, width, height, views, budget, out } => {
            let cfg = common.load()?;
            cfg.validate()?;
            let seed = common.seed(&cfg);
            let mut bundles = Vec::new();
            match bundle {
                Some(dir) => bundles.push((dir.display().to_string(), load_scene_bundle(&dir)?)),
                None => {
                    for v in 0..scenes {
                        let spec = SyntheticSpec::textured(width, height, views, v);
                        bundles.push((format!("textured-{v}"), generate_synthetic_scene(&spec, seed.wrapping_add(v as u64))?));
                    }
                }
            }
            let mut report = AblationReport { budget, scenes: Vec::new(), mean_psnr: Vec::new(), entropy_at_least_random: false };
            for (name, b) in &bundles {
                let rows = sample_ablation(b, &cfg.sampler, budget, &cfg.render)?;
                for r in &rows {
                    eprintln!("{name}: {:>9} tau {:.4} n {:>6} psnr {:.3} ssim {:.4}", r.strategy.to_string(), r.tau, r.primitives, r.psnr, r.ssim);
                }
                report.scenes.push(AblationScene { scene: name.clone(), rows });
            }
            for (i, s) in [SamplingStrategy::Entropy, SamplingStrategy::Laplacian, SamplingStrategy::Random].into_iter().enumerate() {
                let mean = report.scenes.iter().map(|sc| sc.rows[i].psnr).sum::<f64>() / report.scenes.len() as f64;
                report.mean_psnr.push((s, mean));
            }
            report.entropy_at_least_random = report.mean_psnr[0].1 >= report.mean_psnr[2].1;
            print_json(&report, out.as_deref())?;
        }
        Command::KnnBench { common, points, k, queries, verify } => {
            let cfg = common.load()?;
            let k = k.unwrap_or(cfg.k);
            if points == 0 {
                return Err(Error::InvalidConfig("--points must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed(&cfg));
            let pts: Vec<_> = (0..points).map(|_| nalgebra::Vector3::new(rng.gen(), rng.gen(), rng.gen())).collect();
            let t = Instant::now();
            let index = SpatialIndex::build(&pts)?;
            let build_ms = t.elapsed().as_secs_f64() * 1e3;
            let centers: Vec<usize> = (0..queries).map(|_| rng.gen_range(0..points)).collect();
            let t = Instant::now();
            let results: Vec<_> = centers.iter().map(|&c| index.knn(c, k)).collect();
            let query_ms = t.elapsed().as_secs_f64() * 1e3;
            let verified = verify.min(queries);
            let mismatches = centers
                .iter()
                .zip(&results)
                .take(verified)
                .filter(|(&c, r)| brute_force_knn(&pts, c, k).indices != r.indices)
                .count();
            let report = KnnReport { points, k, queries, build_ms, query_ms, verified, mismatches };
            print_json(&report, None)?;
            return Ok(mismatches == 0);
        }
        Command::Gradcheck { common } => {
            let cfg = common.load()?;
            let report = gradcheck::run_all(common.seed(&cfg))?;
            for s in &report.suites {
                println!(
                    "{:<24} {:>6} checks  max rel err {:.3e}  tol {:.0e}  {}",
                    s.name,
                    s.checked,
                    s.max_rel_error,
                    s.tolerance,
                    if s.passed() { "PASS" } else { "FAIL" }
                );
            }
            return Ok(report.all_passed());
        }
        Command::TrainToy { common, size, views, steps, lr, sampling, head, weights_out, csv } => {
            let mut cfg = common.load()?;
            if common.config.is_none() {
                cfg = cfg.with_head_preset(HeadVariant::GeoAttention, HeadPreset::Compact);
                cfg.k = 8;
                cfg.budget = Some(400);
                cfg.train.steps = 500;
            }
            sampling.apply(&mut cfg);
            head.apply(&mut cfg);
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(l) = lr {
                cfg.train.learning_rate = l;
            }
            cfg.validate()?;
            let bundle = generate_synthetic_scene(&SyntheticSpec::textured(size, size, views, 0), common.seed(&cfg))?;
            let head_cfg: HeadConfig = cfg.head_for(&bundle)?;
            let scene = prepare_training_scene(&bundle, &cfg)?;
            let weights = match &cfg.weights {
                Some(p) => crate::predictor::load_weights(p, &head_cfg)?,
                None => init_weights(&head_cfg, cfg.init_seed)?,
            };
            let (weights, report) = train_head(weights, &head_cfg, &[scene], &cfg.render, &cfg.train)?;
            let initial = report.losses.first().copied().unwrap_or(report.final_loss);
            println!(
                "{} steps: mse {:.6} -> {:.6} ({:.1}%), psnr {:.2} -> {:.2} dB",
                report.losses.len(),
                initial,
                report.final_loss,
                100.0 * report.final_loss / initial,
                report.initial_psnr,
                report.final_psnr
            );
            if let Some(p) = csv {
                report.write_csv(&p)?;
            }
            if let Some(p) = weights_out {
                save_weights(&weights, &p)?;
            }
        }
        Command::Timings { common, bundle, taus, out, head } => {
            let mut cfg = common.load()?;
            head.apply(&mut cfg);
            cfg.budget = None;
            let bundle = match bundle {
                Some(dir) => load_scene_bundle(&dir)?,
                None => generate_synthetic_scene(&SyntheticSpec::textured(128, 96, 4, 0), common.seed(&cfg))?,
            };
            let mut rows = Vec::new();
            for tau in taus {
                cfg.sampler.tau = tau;
                rows.push(TauTiming { tau, timing: measure_pipeline(&bundle, &cfg)? });
            }
            print_json(&rows, out.as_deref())?;
        }
    }
    Ok(true)
}

/// Parses `args`, runs the command and maps the outcome to an exit code:
/// 0 success, 1 validation error or failed check, 2 I/O error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}
