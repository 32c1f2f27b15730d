//! Local entropy and sampling probability of one view, with heatmaps.

use entropy_splat::sampling::{local_entropy, probability_map, save_heatmap_png};
use entropy_splat::scene::{generate_synthetic_scene, SyntheticSpec};

fn main() -> entropy_splat::Result<()> {
    let bundle = generate_synthetic_scene(&SyntheticSpec::half_textured(128, 96, 7), 0)?;
    let view = &bundle.views[0];
    let (w, h) = (view.width(), view.height());
    let entropy = local_entropy(&view.image.gray, w, h, 7, 256)?;
    for tau in [0.25, 0.5, 1.0] {
        let p = probability_map(&entropy, tau)?;
        println!("tau {tau}: expected samples {:.1}", p.values.iter().sum::<f64>());
    }
    // The flat right half carries no information at all.
    let right_max = (0..h)
        .flat_map(|v| (w / 2 + 8..w).map(move |u| (u, v)))
        .map(|(u, v)| entropy.values[v * w + u])
        .fold(0.0, f64::max);
    println!("max entropy {:.3} bits, flat half max {right_max}", entropy.values.iter().cloned().fold(0.0, f64::max));
    save_heatmap_png(&entropy.values, w, h, entropy.max_bits(), "entropy.png".as_ref())?;
    Ok(())
}
