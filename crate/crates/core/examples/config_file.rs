//! Writes a pipeline config, reloads it and shows that nothing changed.

use entropy_splat::pipeline::{HeadPreset, PipelineConfig};
use entropy_splat::predictor::HeadVariant;

fn main() -> entropy_splat::Result<()> {
    let mut cfg = PipelineConfig::default().with_head_preset(HeadVariant::EdgeConv, HeadPreset::Compact);
    cfg.budget = Some(150_000);
    cfg.output.ply = Some("scene.ply".into());
    cfg.save("pipeline.toml".as_ref())?;
    print!("{}", cfg.to_toml()?);
    let mut back = PipelineConfig::load("pipeline.toml".as_ref())?;
    // Paths come back resolved against the config's directory.
    back.output.ply = cfg.output.ply.clone();
    println!("round trip identical: {}", back == cfg);
    Ok(())
}
