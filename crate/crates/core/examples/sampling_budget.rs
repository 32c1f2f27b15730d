//! Calibrates τ so that the expected sample count meets a budget, then
//! draws the samples.

use entropy_splat::pipeline::sample_bundle;
use entropy_splat::sampling::{SamplerConfig, SamplingStrategy};
use entropy_splat::scene::{generate_synthetic_scene, SyntheticSpec};

fn main() -> entropy_splat::Result<()> {
    let bundle = generate_synthetic_scene(&SyntheticSpec::textured(128, 96, 4, 0), 0)?;
    for strategy in [SamplingStrategy::Entropy, SamplingStrategy::Laplacian, SamplingStrategy::Random] {
        let cfg = SamplerConfig { strategy, ..Default::default() };
        let sampled = sample_bundle(&bundle, &cfg, Some(5000), 0.02)?;
        let n: usize = sampled.sets.iter().map(|s| s.len()).sum();
        println!("{strategy:>9}: tau {:.4}, {n} samples", sampled.tau);
    }
    Ok(())
}
