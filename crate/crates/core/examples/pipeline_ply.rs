//! Full pipeline on a synthetic bundle, exported to PLY and read back.

use entropy_splat::pipeline::{run_pipeline, HeadPreset, PipelineConfig};
use entropy_splat::ply::{export_ply, parse_ply};
use entropy_splat::predictor::HeadVariant;
use entropy_splat::scene::{generate_synthetic_scene, SyntheticSpec};

fn main() -> entropy_splat::Result<()> {
    let bundle = generate_synthetic_scene(&SyntheticSpec::textured(128, 96, 4, 0), 0)?;
    let mut cfg = PipelineConfig::default().with_head_preset(HeadVariant::Mlp, HeadPreset::Compact);
    cfg.budget = Some(5000);
    let out = run_pipeline(&bundle, &cfg)?;
    println!("tau {:.4}: {} primitives", out.tau, out.gaussians.len());
    for (name, ms) in out.timing.stages() {
        println!("  {name:<8} {ms:8.2} ms");
    }
    export_ply(&out.gaussians, "scene.ply".as_ref())?;
    let back = parse_ply("scene.ply".as_ref())?;
    let worst = out
        .gaussians
        .iter()
        .zip(&back)
        .map(|(a, b)| (a.position - b.position).amax().max((a.opacity - b.opacity).abs()))
        .fold(0.0, f64::max);
    println!("read back {} primitives, worst position/opacity error {worst:.2e}", back.len());
    Ok(())
}
