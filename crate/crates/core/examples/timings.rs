//! Stage timings at increasing τ.

use entropy_splat::pipeline::{measure_pipeline, HeadPreset, PipelineConfig};
use entropy_splat::predictor::HeadVariant;
use entropy_splat::scene::{generate_synthetic_scene, SyntheticSpec};

fn main() -> entropy_splat::Result<()> {
    let bundle = generate_synthetic_scene(&SyntheticSpec::textured(128, 96, 4, 0), 0)?;
    let mut cfg = PipelineConfig::default().with_head_preset(HeadVariant::GeoAttention, HeadPreset::Compact);
    println!("{:>5} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8}", "tau", "anchors", "io", "sampling", "knn", "head", "render");
    for tau in [0.2, 0.5, 1.0] {
        cfg.sampler.tau = tau;
        let t = measure_pipeline(&bundle, &cfg)?;
        println!(
            "{tau:>5} {:>7} {:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>8.1}",
            t.anchor_count, t.io_ms, t.sampling_ms, t.knn_ms, t.head_ms, t.render_ms
        );
    }
    Ok(())
}
