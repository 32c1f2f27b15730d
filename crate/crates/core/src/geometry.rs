//! Pinhole camera math and anchor-cloud construction.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::sampling::PixelSampleSet;
use crate::scene::{CameraIntrinsics, CameraPose, DepthMap, SceneBundle};

/// Width of the geometric feature: position, normal and viewing ray.
pub const GEO_FEATURE_DIM: usize = 9;

/// A sampled pixel lifted to 3D, with its geometric and appearance features.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPoint {
    pub position: Vector3<f64>,
    pub source_view: u32,
    pub pixel: (u32, u32),
    pub normal: Vector3<f64>,
    pub ray: Vector3<f64>,
    pub appearance: Vec<f64>,
    pub geo: [f64; GEO_FEATURE_DIM],
}

impl AnchorPoint {
    fn geo_of(position: &Vector3<f64>, normal: &Vector3<f64>, ray: &Vector3<f64>) -> [f64; GEO_FEATURE_DIM] {
        [
            position.x, position.y, position.z, normal.x, normal.y, normal.z, ray.x, ray.y, ray.z,
        ]
    }
}

/// Anchors of all views, ordered by view id then row-major pixel order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnchorCloud {
    pub anchors: Vec<AnchorPoint>,
    /// `(view_id, first anchor index)` per contributing view.
    pub view_offsets: Vec<(u32, usize)>,
}

impl AnchorCloud {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.anchors.iter().map(|a| a.position).collect()
    }

    /// Diagonal of the axis-aligned bounding box of all anchor positions.
    pub fn bbox_diagonal(&self) -> f64 {
        let Some(first) = self.anchors.first() else { return 0.0 };
        let (mut lo, mut hi) = (first.position, first.position);
        for a in &self.anchors {
            lo = lo.inf(&a.position);
            hi = hi.sup(&a.position);
        }
        (hi - lo).norm()
    }

    /// ASCII `x y z nx ny nz` lines, one anchor per line.
    pub fn write_xyz(&self, path: &Path) -> Result<()> {
        let io_err = |e| Error::Io { path: path.to_path_buf(), source: e };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut w = std::io::BufWriter::new(file);
        for a in &self.anchors {
            let (p, n) = (a.position, a.normal);
            writeln!(w, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }
}

/// Camera-frame point at pixel `(u, v)` and z-depth `depth`, expressed in
/// world coordinates.
pub fn backproject(u: f64, v: f64, depth: f64, intr: &CameraIntrinsics, pose: &CameraPose) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth { view: 0, u: u as u32, v: v as u32, depth });
    }
    let cam = Vector3::new((u - intr.cx) * depth / intr.fx, (v - intr.cy) * depth / intr.fy, depth);
    Ok(pose.camera_to_world_point(&cam))
}

/// Pinhole projection; returns `(u, v, camera-frame z)`.
pub fn project(point: &Vector3<f64>, intr: &CameraIntrinsics, pose: &CameraPose) -> Result<(f64, f64, f64)> {
    let c = pose.world_to_camera_point(point);
    if !(c.z > 0.0) {
        return Err(Error::BehindCamera { z: c.z });
    }
    Ok((intr.fx * c.x / c.z + intr.cx, intr.fy * c.y / c.z + intr.cy, c.z))
}

/// Unit world-frame direction from the camera center through pixel `(u, v)`.
pub fn viewing_ray(u: f64, v: f64, intr: &CameraIntrinsics, pose: &CameraPose) -> Vector3<f64> {
    let d = Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
    (pose.rotation().transpose() * d).normalize()
}

/// Camera-facing unit normal at one pixel from central-difference tangents of
/// the back-projected depth, falling back to one-sided differences next to
/// borders or invalid pixels and to the negated viewing ray when no tangent
/// pair exists.
pub fn normal_at(depth: &DepthMap, u: usize, v: usize, intr: &CameraIntrinsics, pose: &CameraPose) -> Vector3<f64> {
    let ray = viewing_ray(u as f64, v as f64, intr, pose);
    let point = |x: i64, y: i64| -> Option<Vector3<f64>> {
        if x < 0 || y < 0 || x >= depth.width as i64 || y >= depth.height as i64 {
            return None;
        }
        let d = depth.at(x as usize, y as usize)?;
        backproject(x as f64, y as f64, d, intr, pose).ok()
    };
    let (ui, vi) = (u as i64, v as i64);
    let Some(center) = point(ui, vi) else { return -ray };
    let tangent = |prev: Option<Vector3<f64>>, next: Option<Vector3<f64>>| match (prev, next) {
        (Some(a), Some(b)) => Some(b - a),
        (None, Some(b)) => Some(b - center),
        (Some(a), None) => Some(center - a),
        (None, None) => None,
    };
    let tu = tangent(point(ui - 1, vi), point(ui + 1, vi));
    let tv = tangent(point(ui, vi - 1), point(ui, vi + 1));
    let (Some(tu), Some(tv)) = (tu, tv) else { return -ray };
    let n = tu.cross(&tv);
    let len = n.norm();
    if !(len > 1e-300) || !len.is_finite() {
        return -ray;
    }
    let n = n / len;
    if n.dot(&ray) > 0.0 {
        -n
    } else {
        n
    }
}

/// World-frame normals for every pixel; invalid pixels get `-ray`.
pub fn estimate_normals(depth: &DepthMap, intr: &CameraIntrinsics, pose: &CameraPose) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(depth.width * depth.height);
    for v in 0..depth.height {
        for u in 0..depth.width {
            out.push(normal_at(depth, u, v, intr, pose));
        }
    }
    out
}

/// Lifts every sampled pixel to an anchor. Sample sets are matched to views
/// by id; the cloud is ordered by view id then by pixel order.
pub fn build_anchor_cloud(samples: &[PixelSampleSet], bundle: &SceneBundle) -> Result<AnchorCloud> {
    let mut sets: Vec<&PixelSampleSet> = samples.iter().collect();
    sets.sort_by_key(|s| s.view_id);
    let mut cloud = AnchorCloud::default();
    for set in sets {
        let view = bundle.view(set.view_id).ok_or_else(|| {
            Error::InvalidConfig(format!("sample set refers to unknown view {}", set.view_id))
        })?;
        let mut pixels = set.pixels.clone();
        pixels.sort_by_key(|&(u, v)| (v, u));
        cloud.view_offsets.push((set.view_id, cloud.anchors.len()));
        for (u, v) in pixels {
            let (us, vs) = (u as usize, v as usize);
            if us >= view.width() || vs >= view.height() {
                return Err(Error::InvalidConfig(format!(
                    "pixel ({u}, {v}) outside view {}",
                    set.view_id
                )));
            }
            let raw = view.depth.depth[vs * view.width() + us] as f64;
            let d = match view.depth.at(us, vs) {
                Some(d) => d,
                None => return Err(Error::NonPositiveDepth { view: set.view_id, u, v, depth: raw }),
            };
            let position = backproject(u as f64, v as f64, d, &view.intrinsics, &view.pose)
                .map_err(|_| Error::NonPositiveDepth { view: set.view_id, u, v, depth: d })?;
            let ray = viewing_ray(u as f64, v as f64, &view.intrinsics, &view.pose);
            let normal = normal_at(&view.depth, us, vs, &view.intrinsics, &view.pose);
            cloud.anchors.push(AnchorPoint {
                position,
                source_view: set.view_id,
                pixel: (u, v),
                normal,
                ray,
                appearance: view.features.at(us, vs),
                geo: AnchorPoint::geo_of(&position, &normal, &ray),
            });
        }
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn principal_ray_backprojection() {
        let p = backproject(50.0, 50.0, 3.0, &intr(), &CameraPose::identity()).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 3.0));
        let p = backproject(150.0, 50.0, 2.0, &intr(), &CameraPose::identity()).unwrap();
        assert_eq!(p, Vector3::new(2.0, 0.0, 2.0));
        assert!(matches!(
            backproject(1.0, 1.0, 0.0, &intr(), &CameraPose::identity()),
            Err(Error::NonPositiveDepth { .. })
        ));
    }

    #[test]
    fn projection_closed_forms() {
        let (u, v, z) = project(&Vector3::new(2.0, 0.0, 2.0), &intr(), &CameraPose::identity()).unwrap();
        assert_eq!((u, v, z), (150.0, 50.0, 2.0));
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, -1.0), &intr(), &CameraPose::identity()),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn ray_closed_forms() {
        let r = viewing_ray(50.0, 50.0, &intr(), &CameraPose::identity());
        assert_eq!(r, Vector3::new(0.0, 0.0, 1.0));
        let r = viewing_ray(150.0, 50.0, &intr(), &CameraPose::identity());
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((r - Vector3::new(s, 0.0, s)).norm() < 1e-12);
    }

    #[test]
    fn fronto_parallel_normals() {
        let depth = DepthMap::new(100, 100, vec![2.0; 10000], None).unwrap();
        let normals = estimate_normals(&depth, &intr(), &CameraPose::identity());
        for v in 1..99 {
            for u in 1..99 {
                let n = normals[v * 100 + u];
                assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn isolated_pixel_uses_negated_ray() {
        let mut valid = vec![false; 100 * 100];
        valid[40 * 100 + 70] = true;
        let depth = DepthMap::new(100, 100, vec![2.0; 10000], Some(valid)).unwrap();
        let n = normal_at(&depth, 70, 40, &intr(), &CameraPose::identity());
        let r = viewing_ray(70.0, 40.0, &intr(), &CameraPose::identity());
        assert!((n + r).norm() < 1e-12);
    }
}
