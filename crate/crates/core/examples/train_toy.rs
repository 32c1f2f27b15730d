//! Trains a compact attention head end to end on a small scene.

use entropy_splat::pipeline::{prepare_training_scene, HeadPreset, PipelineConfig};
use entropy_splat::predictor::{init_weights, HeadVariant};
use entropy_splat::scene::{generate_synthetic_scene, SyntheticSpec};
use entropy_splat::trainer::train_head;

fn main() -> entropy_splat::Result<()> {
    let bundle = generate_synthetic_scene(&SyntheticSpec::textured(64, 64, 3, 0), 0)?;
    let mut cfg = PipelineConfig::default().with_head_preset(HeadVariant::GeoAttention, HeadPreset::Compact);
    cfg.k = 8;
    cfg.budget = Some(400);
    cfg.train.steps = 100;
    let head = cfg.head_for(&bundle)?;
    let scene = prepare_training_scene(&bundle, &cfg)?;
    let (_, report) = train_head(init_weights(&head, 0)?, &head, &[scene], &cfg.render, &cfg.train)?;
    for (i, l) in report.losses.iter().enumerate().step_by(10) {
        println!("step {i:>3}: mse {l:.5}");
    }
    println!("psnr {:.2} -> {:.2} dB", report.initial_psnr, report.final_psnr);
    Ok(())
}
