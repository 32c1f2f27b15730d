//! Runs every head variant on the same neighborhoods and reports the
//! resulting primitive statistics.

use entropy_splat::geometry::build_anchor_cloud;
use entropy_splat::pipeline::{neighborhoods, sample_bundle};
use entropy_splat::predictor::{init_weights, predict_gaussians, ActivationBounds, HeadConfig, HeadVariant};
use entropy_splat::sampling::SamplerConfig;
use entropy_splat::scene::{generate_synthetic_scene, SyntheticSpec};

fn main() -> entropy_splat::Result<()> {
    let bundle = generate_synthetic_scene(&SyntheticSpec::textured(64, 48, 2, 0), 0)?;
    let sampled = sample_bundle(&bundle, &SamplerConfig::default(), Some(500), 0.02)?;
    let cloud = build_anchor_cloud(&sampled.sets, &bundle)?;
    let sets = neighborhoods(&cloud, 20)?;
    let bounds = ActivationBounds::for_cloud(&cloud);
    for variant in HeadVariant::ALL {
        let config = HeadConfig::full(variant, bundle.feature_channels()?);
        let weights = init_weights(&config, 0)?;
        let t = std::time::Instant::now();
        let g = predict_gaussians(&cloud, &sets, &config, &weights, &bounds)?;
        let mean_opacity = g.iter().map(|p| p.opacity).sum::<f64>() / g.len() as f64;
        println!(
            "{variant:>13}: {} weights, {} primitives in {:.0} ms, mean opacity {mean_opacity:.3}",
            weights.iter().map(|(_, t)| t.data.len()).sum::<usize>(),
            g.len(),
            t.elapsed().as_secs_f64() * 1e3
        );
    }
    Ok(())
}
