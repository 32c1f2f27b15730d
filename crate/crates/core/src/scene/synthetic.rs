//! Procedural ray-cast scenes standing in for a learned depth/feature
//! backbone. Depth is the exact camera-frame z of the nearest ray hit; RGB is
//! the hit primitive's texture quantized to 8 bits.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{
    CameraIntrinsics, CameraPose, DepthMap, FeatureMap, PosedView, SceneBundle, TargetView,
    ViewImage,
};
use crate::error::{Error, Result};
use crate::rng::{mix64, unit_f64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Texture {
    Flat {
        color: [f64; 3],
    },
    /// Two-color checkerboard with optional per-cell value noise.
    Checker {
        cell: f64,
        colors: [[f64; 3]; 2],
        noise: f64,
        noise_cell: f64,
    },
    /// Bands along the second texture coordinate.
    Stripes {
        period: f64,
        colors: [[f64; 3]; 2],
        noise: f64,
        noise_cell: f64,
    },
    /// `below` where the first texture coordinate is `< boundary`, else `above`.
    Split {
        boundary: f64,
        below: Box<Texture>,
        above: Box<Texture>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SyntheticPrimitive {
    /// Plane through `origin`; texture coordinates run along `u_axis` and
    /// `normal × u_axis`. Unbounded unless `half_extent` is set.
    Plane {
        origin: [f64; 3],
        normal: [f64; 3],
        u_axis: [f64; 3],
        texture: Texture,
        half_extent: Option<[f64; 2]>,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        texture: Texture,
    },
}

/// Look-at camera; the principal point sits at the raster center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    pub fx: f64,
    pub fy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub primitives: Vec<SyntheticPrimitive>,
    pub cameras: Vec<CameraSpec>,
    #[serde(default)]
    pub target_cameras: Vec<CameraSpec>,
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

// World y points down so that a camera looking along +z with up = -y has
// camera axes aligned with the world axes.
const UP: [f64; 3] = [0.0, -1.0, 0.0];

impl CameraSpec {
    pub fn new(eye: [f64; 3], target: [f64; 3], focal: f64) -> Self {
        CameraSpec { eye, target, up: UP, fx: focal, fy: focal }
    }

    pub fn intrinsics(&self, width: usize, height: usize) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn pose(&self) -> Result<CameraPose> {
        CameraPose::look_at(v3(self.eye), v3(self.target), v3(self.up))
    }
}

impl Texture {
    fn noisy_checker(cell: f64, colors: [[f64; 3]; 2], noise: f64) -> Self {
        Texture::Checker { cell, colors, noise, noise_cell: cell / 16.0 }
    }

    fn sample(&self, s: f64, t: f64, salt: u64) -> [f64; 3] {
        match self {
            Texture::Flat { color } => *color,
            Texture::Checker { cell, colors, noise, noise_cell } => {
                let parity = ((s / cell).floor() as i64 + (t / cell).floor() as i64).rem_euclid(2);
                add_noise(colors[parity as usize], *noise, *noise_cell, s, t, salt)
            }
            Texture::Stripes { period, colors, noise, noise_cell } => {
                let band = (t / period).floor() as i64;
                add_noise(colors[band.rem_euclid(2) as usize], *noise, *noise_cell, s, t, salt)
            }
            Texture::Split { boundary, below, above } => {
                if s < *boundary {
                    below.sample(s, t, salt)
                } else {
                    above.sample(s, t, salt ^ 0x5bd1_e995)
                }
            }
        }
    }
}

fn add_noise(base: [f64; 3], amplitude: f64, cell: f64, s: f64, t: f64, salt: u64) -> [f64; 3] {
    if amplitude == 0.0 || cell <= 0.0 {
        return base;
    }
    let i = (s / cell).floor() as i64 as u64;
    let j = (t / cell).floor() as i64 as u64;
    let key = mix64(salt ^ mix64(i ^ mix64(j.wrapping_add(0x9e37_79b9))));
    let shared = 2.0 * unit_f64(key) - 1.0;
    let mut out = base;
    for (c, o) in out.iter_mut().enumerate() {
        let own = 2.0 * unit_f64(mix64(key ^ (c as u64 + 1))) - 1.0;
        *o = (*o + amplitude * (0.8 * shared + 0.2 * own)).clamp(0.0, 1.0);
    }
    out
}

struct Hit {
    t: f64,
    color: [f64; 3],
}

impl SyntheticPrimitive {
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, salt: u64) -> Option<Hit> {
        const EPS: f64 = 1e-9;
        match self {
            SyntheticPrimitive::Plane { origin: o, normal, u_axis, texture, half_extent } => {
                let n = v3(*normal).normalize();
                let denom = n.dot(dir);
                if denom.abs() < EPS {
                    return None;
                }
                let t = n.dot(&(v3(*o) - origin)) / denom;
                if t <= EPS {
                    return None;
                }
                let p = origin + dir * t;
                let ua = v3(*u_axis).normalize();
                let va = n.cross(&ua);
                let rel = p - v3(*o);
                let (s, tt) = (rel.dot(&ua), rel.dot(&va));
                if let Some([hu, hv]) = half_extent {
                    if s.abs() > *hu || tt.abs() > *hv {
                        return None;
                    }
                }
                Some(Hit { t, color: texture.sample(s, tt, salt) })
            }
            SyntheticPrimitive::Sphere { center, radius, texture } => {
                let c = v3(*center);
                let oc = origin - c;
                let a = dir.dot(dir);
                let b = 2.0 * oc.dot(dir);
                let cc = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                let t = if t0 > EPS { t0 } else if t1 > EPS { t1 } else { return None };
                let d = (origin + dir * t - c) / *radius;
                let s = d.z.atan2(d.x) * radius;
                let tt = d.y.clamp(-1.0, 1.0).asin() * radius;
                Some(Hit { t, color: texture.sample(s, tt, salt) })
            }
        }
    }

    fn contains_camera(&self, eye: &Vector3<f64>) -> Option<String> {
        match self {
            SyntheticPrimitive::Sphere { center, radius, .. } => {
                let d = (eye - v3(*center)).norm();
                (d <= *radius).then(|| format!("camera lies inside a sphere (distance {d:.4} ≤ radius {radius})"))
            }
            SyntheticPrimitive::Plane { origin, normal, half_extent, .. } => {
                let dist = v3(*normal).normalize().dot(&(eye - v3(*origin)));
                (half_extent.is_none() && dist.abs() < 1e-9).then(|| "camera lies on a plane".to_string())
            }
        }
    }
}

struct Raycast {
    rgb: Vec<u8>,
    depth: Vec<f32>,
    valid: Vec<bool>,
}

fn raycast(spec: &SyntheticSpec, intr: &CameraIntrinsics, pose: &CameraPose, seed: u64) -> Raycast {
    let (w, h) = (intr.width, intr.height);
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut depth = vec![0f32; w * h];
    let mut valid = vec![false; w * h];
    let rot_t = pose.rotation().transpose();
    let origin = pose.center();
    for v in 0..h {
        for u in 0..w {
            // Unnormalized direction with unit camera-frame z: the hit
            // parameter is the z-depth.
            let d_cam = Vector3::new((u as f64 - intr.cx) / intr.fx, (v as f64 - intr.cy) / intr.fy, 1.0);
            let dir = rot_t * d_cam;
            let mut best: Option<Hit> = None;
            for (k, prim) in spec.primitives.iter().enumerate() {
                let salt = mix64(seed ^ mix64(k as u64 + 1));
                if let Some(hit) = prim.intersect(&origin, &dir, salt) {
                    if best.as_ref().map_or(true, |b| hit.t < b.t) {
                        best = Some(hit);
                    }
                }
            }
            let color = match best {
                Some(hit) => {
                    depth[v * w + u] = hit.t as f32;
                    valid[v * w + u] = true;
                    hit.color
                }
                None => spec.background,
            };
            rgb.extend(color.iter().map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    Raycast { rgb, depth, valid }
}

/// Renders every camera of `spec` into a bundle. Identical `(spec, seed)`
/// produce identical bundles.
pub fn generate_synthetic_scene(spec: &SyntheticSpec, seed: u64) -> Result<SceneBundle> {
    if spec.primitives.is_empty() {
        return Err(Error::InvalidConfig("synthetic scene needs at least one primitive".into()));
    }
    if spec.cameras.len() < 2 {
        return Err(Error::InvalidConfig("synthetic scene needs at least two cameras".into()));
    }
    let all_cams = spec.cameras.iter().chain(&spec.target_cameras);
    for (i, cam) in all_cams.enumerate() {
        for prim in &spec.primitives {
            if let Some(reason) = prim.contains_camera(&v3(cam.eye)) {
                return Err(Error::DegenerateCamera { camera: i, reason });
            }
        }
    }

    let mut views = Vec::with_capacity(spec.cameras.len());
    for (i, cam) in spec.cameras.iter().enumerate() {
        let intr = cam.intrinsics(spec.width, spec.height)?;
        let pose = cam.pose()?;
        let rc = raycast(spec, &intr, &pose, seed);
        let image = ViewImage::from_rgb8(spec.width, spec.height, &rc.rgb)?;
        let depth = DepthMap::new(spec.width, spec.height, rc.depth, Some(rc.valid))?;
        let features = FeatureMap::rgb_patch(&image);
        views.push(PosedView::new(i as u32, image, depth, features, intr, pose)?);
    }
    let mut targets = Vec::with_capacity(spec.target_cameras.len());
    for cam in &spec.target_cameras {
        let intr = cam.intrinsics(spec.width, spec.height)?;
        let pose = cam.pose()?;
        let rc = raycast(spec, &intr, &pose, seed);
        let image = ViewImage::from_rgb8(spec.width, spec.height, &rc.rgb)?;
        targets.push(TargetView { image, intrinsics: intr, pose });
    }
    SceneBundle::new(views, targets)
}

impl SyntheticSpec {
    /// Noisy checkered back wall and floor with a striped sphere, seen from
    /// `views` cameras on an arc plus one held-out target camera.
    /// `variant` shifts the sphere and palette so that several distinct
    /// scenes can be drawn from the same preset.
    pub fn textured(width: usize, height: usize, views: usize, variant: u32) -> Self {
        let focal = 0.9 * width as f64;
        let shift = (variant % 5) as f64 * 0.15 - 0.3;
        let hue = (variant % 3) as f64 * 0.2;
        let wall = SyntheticPrimitive::Plane {
            origin: [0.0, 0.0, 3.0],
            normal: [0.0, 0.0, -1.0],
            u_axis: [1.0, 0.0, 0.0],
            texture: Texture::Checker {
                cell: 0.5,
                colors: [[0.8, 0.7 - hue, 0.3 + hue], [0.2 + hue, 0.3, 0.6]],
                noise: 0.1,
                noise_cell: 0.125,
            },
            half_extent: None,
        };
        let floor = SyntheticPrimitive::Plane {
            origin: [0.0, 0.9, 0.0],
            normal: [0.0, -1.0, 0.0],
            u_axis: [1.0, 0.0, 0.0],
            texture: Texture::noisy_checker(0.4, [[0.55, 0.55, 0.5], [0.45, 0.5, 0.45]], 0.03),
            half_extent: None,
        };
        let sphere = SyntheticPrimitive::Sphere {
            center: [shift, 0.2, 1.6],
            radius: 0.55,
            texture: Texture::Stripes {
                period: 0.12,
                colors: [[0.9, 0.2 + hue, 0.2], [0.95, 0.9, 0.3 + hue]],
                noise: 0.0,
                noise_cell: 0.0,
            },
        };
        let look = [0.0, 0.2, 1.6];
        let cameras = (0..views.max(2))
            .map(|i| {
                let a = if views > 1 { i as f64 / (views - 1) as f64 - 0.5 } else { 0.0 };
                CameraSpec::new([1.2 * a, -0.25, -1.6], look, focal)
            })
            .collect();
        SyntheticSpec {
            width,
            height,
            background: [0.0, 0.0, 0.0],
            primitives: vec![wall, floor, sphere],
            cameras,
            target_cameras: vec![CameraSpec::new([0.25, -0.3, -1.5], look, focal)],
        }
    }

    /// A single flat-colored wall filling the frame of two head-on cameras.
    pub fn flat_wall(width: usize, height: usize) -> Self {
        let focal = 0.9 * width as f64;
        SyntheticSpec {
            width,
            height,
            background: [0.0, 0.0, 0.0],
            primitives: vec![SyntheticPrimitive::Plane {
                origin: [0.0, 0.0, 2.0],
                normal: [0.0, 0.0, -1.0],
                u_axis: [1.0, 0.0, 0.0],
                texture: Texture::Flat { color: [0.4, 0.6, 0.5] },
                half_extent: None,
            }],
            cameras: vec![
                CameraSpec::new([0.0, 0.0, 0.0], [0.0, 0.0, 2.0], focal),
                CameraSpec::new([0.2, 0.0, 0.0], [0.2, 0.0, 2.0], focal),
            ],
            target_cameras: vec![],
        }
    }

    /// Wall at z = 2 whose left half (world x < 0, which is image u < W/2 in
    /// both head-on cameras) is noisy and whose right half is one flat color.
    /// The noise stops `margin` short of the seam so that every entropy
    /// window of size ≤ `window` centered in the right half sees only the
    /// flat color.
    pub fn half_textured(width: usize, height: usize, window: usize) -> Self {
        let focal = 0.9 * width as f64;
        let far = 2.5;
        let margin = (window / 2 + 2) as f64 * far / focal;
        let texture = Texture::Split {
            boundary: -margin,
            below: Box::new(Texture::noisy_checker(0.3, [[0.85, 0.4, 0.3], [0.2, 0.5, 0.8]], 0.3)),
            above: Box::new(Texture::Flat { color: [0.35, 0.35, 0.35] }),
        };
        SyntheticSpec {
            width,
            height,
            background: [0.0, 0.0, 0.0],
            primitives: vec![SyntheticPrimitive::Plane {
                origin: [0.0, 0.0, 2.0],
                normal: [0.0, 0.0, -1.0],
                u_axis: [1.0, 0.0, 0.0],
                texture,
                half_extent: None,
            }],
            cameras: vec![
                CameraSpec::new([0.0, 0.0, 0.0], [0.0, 0.0, 2.0], focal),
                CameraSpec::new([0.0, 0.0, -0.5], [0.0, 0.0, 2.0], focal),
            ],
            target_cameras: vec![],
        }
    }

    /// Striped unit sphere at (0, 0, 3) seen by two cameras; rays that miss
    /// the sphere carry invalid depth.
    pub fn sphere_pair(width: usize, height: usize) -> Self {
        let focal = 0.9 * width as f64;
        SyntheticSpec {
            width,
            height,
            background: [0.0, 0.0, 0.0],
            primitives: vec![SyntheticPrimitive::Sphere {
                center: [0.0, 0.0, 3.0],
                radius: 1.0,
                texture: Texture::Stripes {
                    period: 0.1,
                    colors: [[0.9, 0.3, 0.2], [0.2, 0.4, 0.9]],
                    noise: 0.2,
                    noise_cell: 0.02,
                },
            }],
            cameras: vec![
                CameraSpec::new([-0.5, 0.0, 0.0], [0.0, 0.0, 3.0], focal),
                CameraSpec::new([0.5, -0.2, 0.0], [0.0, 0.0, 3.0], focal),
            ],
            target_cameras: vec![],
        }
    }

    /// Checkered plane through (0, 0, 3) tilted 45° about the y axis, with
    /// unit normal (1, 0, -1)/√2.
    pub fn tilted_plane(width: usize, height: usize) -> Self {
        let focal = 0.9 * width as f64;
        let s = std::f64::consts::FRAC_1_SQRT_2;
        SyntheticSpec {
            width,
            height,
            background: [0.0, 0.0, 0.0],
            primitives: vec![SyntheticPrimitive::Plane {
                origin: [0.0, 0.0, 3.0],
                normal: [s, 0.0, -s],
                u_axis: [s, 0.0, s],
                texture: Texture::noisy_checker(0.3, [[0.9, 0.9, 0.9], [0.1, 0.1, 0.1]], 0.1),
                half_extent: None,
            }],
            cameras: vec![
                CameraSpec::new([0.0, 0.0, 0.0], [0.0, 0.0, 3.0], focal),
                CameraSpec::new([0.3, 0.0, 0.0], [0.3, 0.0, 3.0], focal),
            ],
            target_cameras: vec![],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checker_plane_head_on_depth() {
        let mut spec = SyntheticSpec::flat_wall(64, 48);
        spec.primitives = vec![SyntheticPrimitive::Plane {
            origin: [0.0, 0.0, 2.0],
            normal: [0.0, 0.0, -1.0],
            u_axis: [1.0, 0.0, 0.0],
            texture: Texture::noisy_checker(0.25, [[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]], 0.0),
            half_extent: None,
        }];
        let b = generate_synthetic_scene(&spec, 1).unwrap();
        let v = &b.views[0];
        assert_eq!(v.depth.at(32, 24), Some(2.0));
    }

    #[test]
    fn flat_wall_has_constant_gray() {
        let b = generate_synthetic_scene(&SyntheticSpec::flat_wall(32, 24), 3).unwrap();
        for v in &b.views {
            let g0 = v.image.gray[0];
            assert!(v.image.gray.iter().all(|&g| g == g0));
            assert_eq!(v.depth.valid_count(), 32 * 24);
        }
    }

    #[test]
    fn camera_inside_sphere_is_degenerate() {
        let mut spec = SyntheticSpec::sphere_pair(16, 16);
        spec.cameras[1].eye = [0.0, 0.0, 3.2];
        assert!(matches!(
            generate_synthetic_scene(&spec, 0),
            Err(Error::DegenerateCamera { camera: 1, .. })
        ));
    }

    #[test]
    fn needs_two_cameras() {
        let mut spec = SyntheticSpec::flat_wall(16, 16);
        spec.cameras.truncate(1);
        assert!(generate_synthetic_scene(&spec, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::textured(32, 24, 2, 0);
        let a = generate_synthetic_scene(&spec, 9).unwrap();
        let b = generate_synthetic_scene(&spec, 9).unwrap();
        let c = generate_synthetic_scene(&spec, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.views[0].image, c.views[0].image);
    }
}
