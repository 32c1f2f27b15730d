//! Generates the textured synthetic bundle and writes it to disk.
//!
//! cargo run --example synth_scene -- /tmp/bundle

use entropy_splat::scene::{generate_synthetic_scene, save_scene_bundle, SyntheticSpec};

fn main() -> entropy_splat::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic_bundle".into());
    let bundle = generate_synthetic_scene(&SyntheticSpec::textured(128, 96, 4, 0), 0)?;
    save_scene_bundle(&bundle, out.as_ref())?;
    for v in &bundle.views {
        println!("view {}: {}x{}, {} valid depth pixels", v.view_id, v.width(), v.height(), v.depth.valid_count());
    }
    println!("{} target view(s), written to {out}", bundle.target_views.len());
    Ok(())
}
