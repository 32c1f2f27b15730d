//! Entropy, Laplacian and random sampling at the same primitive budget.

use entropy_splat::pipeline::sample_ablation;
use entropy_splat::renderer::RenderConfig;
use entropy_splat::sampling::SamplerConfig;
use entropy_splat::scene::{generate_synthetic_scene, SyntheticSpec};

fn main() -> entropy_splat::Result<()> {
    for variant in 0..3 {
        let bundle = generate_synthetic_scene(&SyntheticSpec::textured(128, 96, 4, variant), variant as u64)?;
        for row in sample_ablation(&bundle, &SamplerConfig::default(), 4000, &RenderConfig::default())? {
            println!(
                "scene {variant} {:>9}: {:>5} primitives, psnr {:.2} dB, ssim {:.3}",
                row.strategy.to_string(),
                row.primitives,
                row.psnr,
                row.ssim
            );
        }
    }
    Ok(())
}
