//! Scene-bundle directory layout.
//!
//! ```text
//! cameras.json        per-view intrinsics + row-major world_to_camera
//! view_<id>.png       8-bit RGB
//! view_<id>.depth     SPTN f32 tensor [H, W]
//! view_<id>.feat      optional SPTN f32 tensor [C, H, W]
//! view_<id>.mask      optional validity raster, one byte per pixel
//! target_<i>.png      optional evaluation images (cameras in "targets")
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    CameraIntrinsics, CameraPose, DepthMap, FeatureMap, PosedView, SceneBundle, TargetView,
    ViewImage,
};
use crate::error::{Error, Result};
use crate::tensor_io::RawTensor;

const CAMERAS_FILE: &str = "cameras.json";
const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CameraRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u32>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    world_to_camera: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CamerasFile {
    #[serde(default = "default_version")]
    version: u32,
    views: Vec<CameraRecord>,
    #[serde(default)]
    targets: Vec<CameraRecord>,
}

fn default_version() -> u32 {
    LAYOUT_VERSION
}

impl CameraRecord {
    fn from_parts(id: Option<u32>, intr: &CameraIntrinsics, pose: &CameraPose) -> Self {
        CameraRecord {
            id,
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            width: intr.width,
            height: intr.height,
            world_to_camera: pose.row_major().to_vec(),
        }
    }

    fn parts(&self, context: &str) -> Result<(CameraIntrinsics, CameraPose)> {
        let intr = CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        };
        intr.validate(context)?;
        let entries: [f64; 16] = self.world_to_camera.as_slice().try_into().map_err(|_| {
            Error::MalformedHeader {
                context: context.to_string(),
                reason: format!(
                    "world_to_camera needs 16 entries, found {}",
                    self.world_to_camera.len()
                ),
            }
        })?;
        let pose = CameraPose::from_row_major(&entries, context)?;
        Ok((intr, pose))
    }
}

fn view_path(dir: &Path, id: u32, ext: &str) -> PathBuf {
    dir.join(format!("view_{id}.{ext}"))
}

fn read_png(path: &Path) -> Result<ViewImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::MalformedHeader {
                context: path.display().to_string(),
                reason: other.to_string(),
            },
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    ViewImage::from_rgb8(w as usize, h as usize, img.as_raw())
}

pub(crate) fn write_png_rgb8(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    let img = image::RgbImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::dims(path.display().to_string(), width * height * 3, "short buffer"))?;
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io { path: path.to_path_buf(), source: io },
        other => Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(other.to_string()),
        },
    })
}

pub(crate) fn write_png_gray8(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::dims(path.display().to_string(), width * height, "short buffer"))?;
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io { path: path.to_path_buf(), source: io },
        other => Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(other.to_string()),
        },
    })
}

fn expect_dims(path: &Path, found: &[usize], expected: &[usize]) -> Result<()> {
    if found != expected {
        return Err(Error::dims(
            path.display().to_string(),
            format!("{expected:?}"),
            format!("{found:?}"),
        ));
    }
    Ok(())
}

/// Loads and validates a bundle directory. Views without a `.feat` file get
/// the RGB-patch fallback features.
pub fn load_scene_bundle(dir: &Path) -> Result<SceneBundle> {
    let cam_path = dir.join(CAMERAS_FILE);
    let text = fs::read_to_string(&cam_path).map_err(|e| Error::io(&cam_path, e))?;
    let cameras: CamerasFile = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        context: cam_path.display().to_string(),
        reason: e.to_string(),
    })?;
    if cameras.version != LAYOUT_VERSION {
        return Err(Error::MalformedHeader {
            context: cam_path.display().to_string(),
            reason: format!("unsupported layout version {}", cameras.version),
        });
    }

    let mut views = Vec::with_capacity(cameras.views.len());
    for (i, rec) in cameras.views.iter().enumerate() {
        let id = rec.id.unwrap_or(i as u32);
        let ctx = format!("{} view {id}", cam_path.display());
        let (intr, pose) = rec.parts(&ctx)?;
        let (w, h) = (intr.width, intr.height);

        let png = view_path(dir, id, "png");
        let image = read_png(&png)?;
        expect_dims(&png, &[image.height, image.width], &[h, w])?;

        let depth_path = view_path(dir, id, "depth");
        let depth_t = RawTensor::load(&depth_path)?;
        expect_dims(&depth_path, &depth_t.dims, &[h, w])?;
        let depth_raw = depth_t.into_f32(&depth_path.display().to_string())?;

        let mask_path = view_path(dir, id, "mask");
        let mask = if mask_path.exists() {
            let bytes = fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
            if bytes.len() != w * h {
                return Err(Error::dims(mask_path.display().to_string(), w * h, bytes.len()));
            }
            Some(bytes.into_iter().map(|b| b != 0).collect())
        } else {
            None
        };
        let depth = DepthMap::new(w, h, depth_raw, mask)?;

        let feat_path = view_path(dir, id, "feat");
        let features = if feat_path.exists() {
            let t = RawTensor::load(&feat_path)?;
            if t.dims.len() != 3 || t.dims[1] != h || t.dims[2] != w {
                return Err(Error::dims(
                    feat_path.display().to_string(),
                    format!("[C, {h}, {w}]"),
                    format!("{:?}", t.dims),
                ));
            }
            let c = t.dims[0];
            FeatureMap::new(c, w, h, t.into_f32(&feat_path.display().to_string())?)?
        } else {
            FeatureMap::rgb_patch(&image)
        };

        views.push(PosedView::new(id, image, depth, features, intr, pose)?);
    }

    let mut targets = Vec::with_capacity(cameras.targets.len());
    for (i, rec) in cameras.targets.iter().enumerate() {
        let ctx = format!("{} target {i}", cam_path.display());
        let (intr, pose) = rec.parts(&ctx)?;
        let png = dir.join(format!("target_{i}.png"));
        let image = read_png(&png)?;
        expect_dims(&png, &[image.height, image.width], &[intr.height, intr.width])?;
        targets.push(TargetView { image, intrinsics: intr, pose });
    }

    SceneBundle::new(views, targets)
}

/// Writes a bundle in the directory layout read by [`load_scene_bundle`].
pub fn save_scene_bundle(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    let io_err = |path: &Path, e: std::io::Error| Error::Io { path: path.to_path_buf(), source: e };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let cameras = CamerasFile {
        version: LAYOUT_VERSION,
        views: bundle
            .views
            .iter()
            .map(|v| CameraRecord::from_parts(Some(v.view_id), &v.intrinsics, &v.pose))
            .collect(),
        targets: bundle
            .target_views
            .iter()
            .map(|t| CameraRecord::from_parts(None, &t.intrinsics, &t.pose))
            .collect(),
    };
    let cam_path = dir.join(CAMERAS_FILE);
    let json = serde_json::to_string_pretty(&cameras).expect("camera records serialize");
    fs::write(&cam_path, json).map_err(|e| io_err(&cam_path, e))?;

    for v in &bundle.views {
        let (w, h) = (v.width(), v.height());
        write_png_rgb8(&view_path(dir, v.view_id, "png"), w, h, v.image.to_rgb8())?;
        RawTensor::f32(vec![h, w], v.depth.depth.clone())
            .save(&view_path(dir, v.view_id, "depth"))
            .map_err(save_err)?;
        let mask_path = view_path(dir, v.view_id, "mask");
        if v.depth.valid.iter().any(|m| !m) {
            let bytes: Vec<u8> = v.depth.valid.iter().map(|&m| m as u8).collect();
            fs::write(&mask_path, bytes).map_err(|e| io_err(&mask_path, e))?;
        } else if mask_path.exists() {
            fs::remove_file(&mask_path).map_err(|e| io_err(&mask_path, e))?;
        }
        RawTensor::f32(vec![v.features.channels, h, w], v.features.data.clone())
            .save(&view_path(dir, v.view_id, "feat"))
            .map_err(save_err)?;
    }
    for (i, t) in bundle.target_views.iter().enumerate() {
        write_png_rgb8(
            &dir.join(format!("target_{i}.png")),
            t.image.width,
            t.image.height,
            t.image.to_rgb8(),
        )?;
    }
    Ok(())
}

// Saving never reports MissingFile; a missing parent is an i/o failure.
fn save_err(e: Error) -> Error {
    match e {
        Error::MissingFile(path) => Error::Io {
            path,
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        },
        other => other,
    }
}
