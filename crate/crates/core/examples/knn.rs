//! Exact kd-tree neighbors against brute force on random points.

use std::time::Instant;

use entropy_splat::neighborhood::{brute_force_knn, SpatialIndex};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> entropy_splat::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let points: Vec<Vector3<f64>> = (0..20_000).map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen())).collect();
    let t = Instant::now();
    let index = SpatialIndex::build(&points)?;
    println!("built over {} points in {:.1} ms", points.len(), t.elapsed().as_secs_f64() * 1e3);
    let t = Instant::now();
    let sets: Vec<_> = (0..points.len()).map(|i| index.knn(i, 20)).collect();
    println!("20-NN of every point in {:.1} ms", t.elapsed().as_secs_f64() * 1e3);
    let mismatches = (0..points.len())
        .step_by(97)
        .filter(|&i| brute_force_knn(&points, i, 20).indices != sets[i].indices)
        .count();
    println!("mismatches against brute force: {mismatches}");
    Ok(())
}
