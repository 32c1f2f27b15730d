//! Renders a handful of primitives and writes color and depth images.

use entropy_splat::gaussian::GaussianPrimitive;
use entropy_splat::renderer::{render, RenderConfig};
use entropy_splat::sampling::save_heatmap_png;
use entropy_splat::scene::{CameraIntrinsics, CameraPose};
use nalgebra::Vector3;

fn main() -> entropy_splat::Result<()> {
    let intr = CameraIntrinsics::new(120.0, 120.0, 64.0, 48.0, 128, 96)?;
    let mut prims = vec![
        GaussianPrimitive::isotropic(Vector3::new(-0.4, 0.0, 3.0), 0.3, 0.9, [0.9, 0.2, 0.2]),
        GaussianPrimitive::isotropic(Vector3::new(0.3, 0.1, 2.5), 0.25, 0.7, [0.2, 0.8, 0.3]),
    ];
    let mut elongated = GaussianPrimitive::isotropic(Vector3::new(0.0, -0.4, 3.5), 0.1, 0.95, [0.2, 0.3, 0.9]);
    elongated.scale = Vector3::new(0.6, 0.08, 0.08);
    elongated.rotation = [0.924, 0.0, 0.0, 0.383];
    prims.push(elongated);
    let frame = render(&prims, &intr, &CameraPose::identity(), &RenderConfig::default());
    frame.to_frame().save_png("render.png".as_ref())?;
    save_heatmap_png(&frame.depth, frame.width, frame.height, 4.0, "render_depth.png".as_ref())?;
    let covered = frame.alpha.iter().filter(|a| **a > 0.5).count();
    println!("{covered} of {} pixels above half coverage", frame.alpha.len());
    Ok(())
}
