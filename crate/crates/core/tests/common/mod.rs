//! Independent reference implementations used as test oracles, plus small
//! random-input builders. Nothing here calls into the code under test except
//! for plain data types.

#![allow(dead_code)]

use std::collections::BTreeMap;

use entropy_splat::gaussian::GaussianPrimitive;
use entropy_splat::scene::{CameraIntrinsics, CameraPose};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rand::Rng;

/// Per-window histogram entropy with replicate padding, built from scratch
/// for every pixel.
pub fn entropy_oracle(gray: &[f64], w: usize, h: usize, window: usize, levels: usize) -> Vec<f64> {
    let r = (window / 2) as i64;
    let n = (window * window) as f64;
    let mut out = vec![0.0; w * h];
    for v in 0..h as i64 {
        for u in 0..w as i64 {
            let mut hist: BTreeMap<usize, u32> = BTreeMap::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let x = (u + dx).clamp(0, w as i64 - 1) as usize;
                    let y = (v + dy).clamp(0, h as i64 - 1) as usize;
                    let bin = ((gray[y * w + x] * levels as f64).floor() as usize).min(levels - 1);
                    *hist.entry(bin).or_default() += 1;
                }
            }
            let mut e = 0.0;
            for &c in hist.values() {
                let p = c as f64 / n;
                e -= p * p.log2();
            }
            out[v as usize * w + u as usize] = e;
        }
    }
    out
}

pub struct OracleConfig {
    pub background: [f64; 3],
    pub sigma_cutoff: f64,
    pub opacity_cutoff: f64,
    pub blur: f64,
    pub near: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { background: [0.0; 3], sigma_cutoff: 3.0, opacity_cutoff: 1.0 / 255.0, blur: 0.3, near: 0.01 }
    }
}

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;

fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner()
}

struct Splat {
    index: usize,
    mean: [f64; 2],
    inv: Matrix2<f64>,
    depth: f64,
    color: [f64; 3],
    opacity: f64,
}

fn splat(index: usize, g: &GaussianPrimitive, intr: &CameraIntrinsics, pose: &CameraPose, cfg: &OracleConfig) -> Option<Splat> {
    let m = pose.matrix();
    let rot = m.fixed_view::<3, 3>(0, 0).into_owned();
    let t = rot * g.position + m.fixed_view::<3, 1>(0, 3).into_owned();
    if t.z <= cfg.near {
        return None;
    }
    let jac = Matrix2x3::new(
        intr.fx / t.z,
        0.0,
        -intr.fx * t.x / (t.z * t.z),
        0.0,
        intr.fy / t.z,
        -intr.fy * t.y / (t.z * t.z),
    );
    let r = quat_to_matrix(g.rotation);
    let s = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    let cov3 = r * s * r.transpose();
    let cov2 = jac * rot * cov3 * rot.transpose() * jac.transpose() + Matrix2::identity() * cfg.blur;
    let inv = cov2.try_inverse()?;
    if cov2.determinant() <= 0.0 {
        return None;
    }
    let eye = -rot.transpose() * m.fixed_view::<3, 1>(0, 3).into_owned();
    let d = (g.position - eye).normalize();
    let basis = [C0, -C1 * d.y, C1 * d.z, -C1 * d.x];
    let mut color = [0.0; 3];
    for (ch, out) in color.iter_mut().enumerate() {
        let c: f64 = (0..4).map(|k| basis[k] * g.sh[k][ch]).sum();
        *out = c.clamp(0.0, 1.0);
    }
    Some(Splat {
        index,
        mean: [intr.fx * t.x / t.z + intr.cx, intr.fy * t.y / t.z + intr.cy],
        inv,
        depth: t.z,
        color,
        opacity: g.opacity,
    })
}

/// Front-to-back compositing over every primitive at every pixel, with no
/// tiling and no bounding boxes. Returns interleaved RGB.
pub fn render_oracle(prims: &[GaussianPrimitive], intr: &CameraIntrinsics, pose: &CameraPose, cfg: &OracleConfig) -> Vec<f64> {
    let mut splats: Vec<Splat> = prims.iter().enumerate().filter_map(|(i, g)| splat(i, g, intr, pose, cfg)).collect();
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
    let mut out = Vec::with_capacity(intr.width * intr.height * 3);
    for v in 0..intr.height {
        for u in 0..intr.width {
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for s in &splats {
                let d = nalgebra::Vector2::new(u as f64 - s.mean[0], v as f64 - s.mean[1]);
                let m2 = (d.transpose() * s.inv * d)[0];
                if m2 > cfg.sigma_cutoff * cfg.sigma_cutoff {
                    continue;
                }
                let f = (s.opacity * (-0.5 * m2).exp()).min(0.99);
                if f < cfg.opacity_cutoff {
                    continue;
                }
                for ch in 0..3 {
                    c[ch] += f * t * s.color[ch];
                }
                t *= 1.0 - f;
                if t < 1e-4 {
                    break;
                }
            }
            for ch in 0..3 {
                out.push(c[ch] + t * cfg.background[ch]);
            }
        }
    }
    out
}

/// Random primitive in front of an identity camera looking down +z.
pub fn random_primitive<R: Rng>(rng: &mut R) -> GaussianPrimitive {
    let q: Vector3<f64> = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let w: f64 = rng.gen_range(-1.0..1.0);
    let n = (w * w + q.norm_squared()).sqrt().max(1e-9);
    let mut sh = [[0.0; 3]; 4];
    for row in sh.iter_mut() {
        for c in row.iter_mut() {
            *c = rng.gen_range(-0.6..0.6);
        }
    }
    for c in 0..3 {
        sh[0][c] = rng.gen_range(0.0..1.0) / C0;
    }
    GaussianPrimitive {
        position: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(2.0..5.0)),
        opacity: rng.gen_range(0.05..0.99),
        scale: Vector3::new(rng.gen_range(0.01..0.3), rng.gen_range(0.01..0.3), rng.gen_range(0.01..0.3)),
        rotation: [w / n, q.x / n, q.y / n, q.z / n],
        sh,
    }
}

pub fn random_gray<R: Rng>(rng: &mut R, w: usize, h: usize) -> Vec<f64> {
    (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect()
}

/// Gray raster with a few flat patches so that windows of every entropy
/// level appear.
pub fn patchy_gray<R: Rng>(rng: &mut R, w: usize, h: usize) -> Vec<f64> {
    let mut g = random_gray(rng, w, h);
    for _ in 0..3 {
        let (x0, y0) = (rng.gen_range(0..w), rng.gen_range(0..h));
        let (pw, ph) = (rng.gen_range(1..w / 2), rng.gen_range(1..h / 2));
        let value = rng.gen_range(0.0..1.0);
        for y in y0..(y0 + ph).min(h) {
            for x in x0..(x0 + pw).min(w) {
                g[y * w + x] = value;
            }
        }
    }
    g
}

pub fn random_points<R: Rng>(rng: &mut R, n: usize) -> Vec<Vector3<f64>> {
    match rng.gen_range(0..3) {
        // Uniform cube.
        0 => (0..n).map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen())).collect(),
        // Coarse lattice: many exact distance ties.
        1 => (0..n)
            .map(|_| Vector3::new(rng.gen_range(0..8) as f64, rng.gen_range(0..8) as f64, rng.gen_range(0..8) as f64))
            .collect(),
        // Thin clustered sheet.
        _ => (0..n)
            .map(|_| {
                let c = rng.gen_range(0..5) as f64;
                Vector3::new(c + rng.gen_range(-0.1..0.1), rng.gen_range(-1.0..1.0), 1e-3 * rng.gen::<f64>())
            })
            .collect(),
    }
}
