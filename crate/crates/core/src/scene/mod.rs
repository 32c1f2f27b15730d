//! Posed RGB-D views and the scene bundle that groups them.

mod io;
pub mod synthetic;

pub use io::{load_scene_bundle, save_scene_bundle};
pub(crate) use io::{write_png_gray8 as io_png_gray, write_png_rgb8 as io_png_rgb};
pub use synthetic::{generate_synthetic_scene, CameraSpec, SyntheticPrimitive, SyntheticSpec, Texture};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Channel count of the RGB-patch feature fallback (3×3 patch, 3 channels).
pub const PATCH_FEATURE_CHANNELS: usize = 27;

const ROTATION_TOLERANCE: f64 = 1e-6;

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = CameraIntrinsics { fx, fy, cx, cy, width, height };
        intr.validate("intrinsics")?;
        Ok(intr)
    }

    pub fn validate(&self, context: &str) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidIntrinsics {
                context: context.to_string(),
                reason,
            })
        };
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return fail(format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return fail("raster size must be nonzero".into());
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return fail(format!("cx={} outside (0, {})", self.cx, self.width));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return fail(format!("cy={} outside (0, {})", self.cy, self.height));
        }
        Ok(())
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    world_to_camera: Matrix4<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose { world_to_camera: Matrix4::identity() }
    }

    /// Validates rigidity: orthonormal rotation block with determinant +1 and
    /// a homogeneous last row.
    pub fn new(world_to_camera: Matrix4<f64>) -> Result<Self> {
        Self::checked(world_to_camera, "pose")
    }

    pub(crate) fn checked(m: Matrix4<f64>, context: &str) -> Result<Self> {
        let fail = |reason: String| {
            Err(Error::NonRigidPose {
                context: context.to_string(),
                reason,
            })
        };
        if m.iter().any(|x| !x.is_finite()) {
            return fail("non-finite entries".into());
        }
        let last = m.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return fail(format!("last row is {last}, expected (0, 0, 0, 1)"));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > ROTATION_TOLERANCE {
            return fail(format!("rotation block not orthonormal (error {err:.3e})"));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return fail(format!("rotation determinant {det}, expected +1"));
        }
        Ok(CameraPose { world_to_camera: m })
    }

    /// Camera at `eye` looking at `target`; camera axes are x right, y down,
    /// z forward.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::NonRigidPose {
                context: "look_at".into(),
                reason: "eye and target coincide".into(),
            });
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(Error::NonRigidPose {
                context: "look_at".into(),
                reason: "up vector parallel to viewing direction".into(),
            });
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::checked(m, "look_at")
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.world_to_camera
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn world_to_camera_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn camera_to_world_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (p - self.translation())
    }

    pub fn row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.world_to_camera[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(entries: &[f64; 16], context: &str) -> Result<Self> {
        Self::checked(Matrix4::from_row_slice(entries), context)
    }

    /// Pose of the same camera after the world is re-expressed through the
    /// rigid transform `world_change` (new = world_change · old).
    pub fn reexpressed(&self, world_change: &Matrix4<f64>) -> Result<Self> {
        let change = Self::checked(*world_change, "world change")?;
        let r = change.rotation().transpose();
        let mut inv = Matrix4::identity();
        inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        inv.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-r * change.translation()));
        Self::checked(self.world_to_camera * inv, "reexpressed")
    }
}

/// BT.601 luma of an interleaved `H×W×3` RGB raster.
pub fn grayscale(rgb: &[f32]) -> Vec<f64> {
    rgb.chunks_exact(3)
        .map(|p| {
            // Written relative to blue so that gray inputs map to themselves
            // exactly; algebraically equal to the weighted sum.
            let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
            let g = b + LUMA_WEIGHTS[0] * (r - b) + LUMA_WEIGHTS[1] * (g - b);
            g.clamp(0.0, 1.0)
        })
        .collect()
}

/// RGB image with its derived grayscale.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved row-major `H×W×3`, values in [0, 1].
    pub rgb: Vec<f32>,
    pub gray: Vec<f64>,
}

impl ViewImage {
    pub fn new(width: usize, height: usize, rgb: Vec<f32>) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::dims("rgb raster", width * height * 3, rgb.len()));
        }
        if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("rgb values must lie in [0, 1]".into()));
        }
        let gray = grayscale(&rgb);
        Ok(ViewImage { width, height, rgb, gray })
    }

    /// Image from 8-bit RGB bytes, mapping each byte to `b / 255`.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.rgb.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.rgb[i] as f64, self.rgb[i + 1] as f64, self.rgb[i + 2] as f64]
    }

    pub fn to_frame(&self) -> crate::metrics::RgbFrame {
        crate::metrics::RgbFrame {
            width: self.width,
            height: self.height,
            data: self.rgb.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Depth raster with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Pixels with non-finite or non-positive depth are marked invalid
    /// regardless of `valid`.
    pub fn new(width: usize, height: usize, depth: Vec<f32>, valid: Option<Vec<bool>>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::dims("depth raster", width * height, depth.len()));
        }
        let mut mask = match valid {
            Some(m) if m.len() != depth.len() => {
                return Err(Error::dims("validity mask", depth.len(), m.len()))
            }
            Some(m) => m,
            None => vec![true; depth.len()],
        };
        for (m, d) in mask.iter_mut().zip(&depth) {
            *m = *m && d.is_finite() && *d > 0.0;
        }
        Ok(DepthMap { width, height, depth, valid: mask })
    }

    pub fn at(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.valid[i].then(|| self.depth[i] as f64)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&m| m).count()
    }
}

/// Channel-major `C×H×W` per-pixel features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * width * height {
            return Err(Error::dims("feature map", channels * width * height, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap { channels, width, height, data })
    }

    /// Fallback appearance features: the flattened 3×3 RGB patch around each
    /// pixel, replicate-padded. Channel `(dy+1)*9 + (dx+1)*3 + c`.
    pub fn rgb_patch(image: &ViewImage) -> Self {
        let (w, h) = (image.width, image.height);
        let plane = w * h;
        let mut data = vec![0f32; PATCH_FEATURE_CHANNELS * plane];
        for v in 0..h {
            for u in 0..w {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let su = (u as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        let sv = (v as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let src = (sv * w + su) * 3;
                        let base = ((dy + 1) * 9 + (dx + 1) * 3) as usize;
                        for c in 0..3 {
                            data[(base + c) * plane + v * w + u] = image.rgb[src + c];
                        }
                    }
                }
            }
        }
        FeatureMap { channels: PATCH_FEATURE_CHANNELS, width: w, height: h, data }
    }

    pub fn at(&self, u: usize, v: usize) -> Vec<f64> {
        let plane = self.width * self.height;
        let i = v * self.width + u;
        (0..self.channels).map(|c| self.data[c * plane + i] as f64).collect()
    }
}

/// One input view.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedView {
    pub view_id: u32,
    pub image: ViewImage,
    pub depth: DepthMap,
    pub features: FeatureMap,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl PosedView {
    pub fn new(
        view_id: u32,
        image: ViewImage,
        depth: DepthMap,
        features: FeatureMap,
        intrinsics: CameraIntrinsics,
        pose: CameraPose,
    ) -> Result<Self> {
        let ctx = format!("view {view_id}");
        intrinsics.validate(&ctx)?;
        let expect = format!("{}x{}", intrinsics.width, intrinsics.height);
        for (what, w, h) in [
            ("image", image.width, image.height),
            ("depth", depth.width, depth.height),
            ("features", features.width, features.height),
        ] {
            if (w, h) != (intrinsics.width, intrinsics.height) {
                return Err(Error::dims(format!("{ctx} {what}"), &expect, format!("{w}x{h}")));
            }
        }
        Ok(PosedView { view_id, image, depth, features, intrinsics, pose })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }
}

/// Evaluation-only view: an image and its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetView {
    pub image: ViewImage,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl TargetView {
    pub fn from_view(view: &PosedView) -> Self {
        TargetView {
            image: view.image.clone(),
            intrinsics: view.intrinsics,
            pose: view.pose,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub views: Vec<PosedView>,
    pub target_views: Vec<TargetView>,
}

impl SceneBundle {
    pub fn new(views: Vec<PosedView>, target_views: Vec<TargetView>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidConfig("a scene bundle needs at least one view".into()));
        }
        let mut ids: Vec<u32> = views.iter().map(|v| v.view_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("view ids must be unique".into()));
        }
        Ok(SceneBundle { views, target_views })
    }

    pub fn view(&self, id: u32) -> Option<&PosedView> {
        self.views.iter().find(|v| v.view_id == id)
    }

    /// Feature width shared by all views.
    pub fn feature_channels(&self) -> Result<usize> {
        let c = self.views[0].features.channels;
        for v in &self.views {
            if v.features.channels != c {
                return Err(Error::dims(
                    format!("feature channels of view {}", v.view_id),
                    c,
                    v.features.channels,
                ));
            }
        }
        Ok(c)
    }

    /// Target views if present, otherwise the input views themselves.
    pub fn evaluation_views(&self) -> Vec<TargetView> {
        if self.target_views.is_empty() {
            self.views.iter().map(TargetView::from_view).collect()
        } else {
            self.target_views.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_closed_forms() {
        assert_eq!(grayscale(&[0.0, 0.0, 0.0]), vec![0.0]);
        assert_eq!(grayscale(&[1.0, 1.0, 1.0]), vec![1.0]);
        let red: Vec<f32> = (0..12).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        assert!(grayscale(&red).iter().all(|&g| g == 0.299));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).is_ok());
        assert!(matches!(
            CameraIntrinsics::new(-1.0, 100.0, 50.0, 50.0, 100, 100),
            Err(Error::InvalidIntrinsics { .. })
        ));
        assert!(CameraIntrinsics::new(100.0, 100.0, 0.0, 50.0, 100, 100).is_err());
        assert!(CameraIntrinsics::new(100.0, 100.0, 50.0, 100.0, 100, 100).is_err());
    }

    #[test]
    fn pose_validation() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(matches!(CameraPose::new(m), Err(Error::NonRigidPose { .. })));
        let mut reflect = Matrix4::identity();
        reflect[(2, 2)] = -1.0;
        assert!(CameraPose::new(reflect).is_err());
        let mut bad_row = Matrix4::identity();
        bad_row[(3, 0)] = 0.5;
        assert!(CameraPose::new(bad_row).is_err());
    }

    #[test]
    fn look_at_axes() {
        let pose = CameraPose::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
        )
        .unwrap();
        let p = pose.world_to_camera_point(&Vector3::zeros());
        assert!((p - Vector3::new(0.0, 0.0, 3.0)).norm() < 1e-12);
        assert!((pose.center() - Vector3::new(0.0, 0.0, -3.0)).norm() < 1e-12);
        let right = pose.world_to_camera_point(&Vector3::new(1.0, 0.0, 0.0));
        assert!(right.x > 0.0);
    }

    #[test]
    fn rgb_patch_fallback_replicates_borders() {
        let img = ViewImage::new(2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let f = FeatureMap::rgb_patch(&img);
        assert_eq!(f.channels, 27);
        let at0 = f.at(0, 0);
        // center of the patch is the pixel itself
        assert_eq!(&at0[12..15], &[0.1f32 as f64, 0.2f32 as f64, 0.3f32 as f64]);
        // left neighbor of pixel 0 is replicated pixel 0
        assert_eq!(&at0[9..12], &at0[12..15]);
        // right neighbor of pixel 0 is pixel 1
        assert_eq!(at0[15], 0.4f32 as f64);
    }

    #[test]
    fn depth_mask_excludes_nonpositive() {
        let d = DepthMap::new(3, 1, vec![1.0, 0.0, f32::NAN], None).unwrap();
        assert_eq!(d.valid, vec![true, false, false]);
        assert_eq!(d.at(0, 0), Some(1.0));
        assert_eq!(d.at(1, 0), None);
    }
}
