//! CPU reference Gaussian splatting with an analytic backward pass.
//!
//! Pixel centers sit at integer coordinates. Primitives are projected with
//! the linearized perspective (EWA) model, binned into square tiles, sorted
//! per tile by camera depth (ties by index) and composited front to back.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{eval_sh, sh_basis, GaussianGrad, GaussianPrimitive, SH_C1, SH_COEFFS};
use crate::metrics::RgbFrame;
use crate::scene::{CameraIntrinsics, CameraPose};

/// Per-contributor weight ceiling, as in classic splatting.
pub const MAX_ALPHA: f64 = 0.99;
/// Compositing stops once transmittance drops below this.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub background: [f64; 3],
    pub tile_size: usize,
    /// Footprint cutoff in standard deviations.
    pub sigma_cutoff: f64,
    /// Contributions with a smaller weight are skipped.
    pub opacity_cutoff: f64,
    /// Added to the diagonal of every screen-space covariance, px².
    pub blur_floor: f64,
    pub near: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            background: [0.0; 3],
            tile_size: 16,
            sigma_cutoff: 3.0,
            opacity_cutoff: 1.0 / 255.0,
            blur_floor: 0.3,
            near: 0.01,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || !(self.sigma_cutoff > 0.0) || !(self.opacity_cutoff > 0.0) || !(self.near > 0.0) || self.blur_floor < 0.0 {
            return Err(Error::InvalidConfig(
                "render cutoffs and near plane must be positive, tile size nonzero, blur floor nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// A primitive projected into one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian2D {
    pub index: usize,
    pub mean2d: [f64; 2],
    /// Screen covariance `(a, b, c)` of `[[a, b], [b, c]]`, blur included.
    pub cov2d: [f64; 3],
    /// Packed inverse of `cov2d`.
    pub conic: [f64; 3],
    pub depth_cam: f64,
    /// Clamped SH color along the camera-to-mean direction.
    pub color: [f64; 3],
    pub opacity: f64,
    /// Inclusive pixel bounds `(u0, u1, v0, v1)` of the padded footprint.
    pub bounds: [usize; 4],
    t_cam: Vector3<f64>,
    raw_color: [f64; 3],
    dir: Vector3<f64>,
    dist: f64,
    jw: Matrix2x3<f64>,
    cov3d: Matrix3<f64>,
}

/// Rotation matrix of `(w, x, y, z)`, assumed unit.
pub fn rotation_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `dL/dq` given `dL/dR`.
fn rotation_backward(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    [g.component_mul(&dw).sum(), g.component_mul(&dx).sum(), g.component_mul(&dy).sum(), g.component_mul(&dz).sum()]
}

/// `Σ = R diag(s)² Rᵀ`.
pub fn covariance3d(scale: &Vector3<f64>, q: &[f64; 4]) -> Matrix3<f64> {
    let m = rotation_matrix(q) * Matrix3::from_diagonal(scale);
    m * m.transpose()
}

/// Projects one primitive; `None` when it is culled.
pub fn project_gaussian(
    index: usize,
    prim: &GaussianPrimitive,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    cfg: &RenderConfig,
) -> Option<Gaussian2D> {
    let t = pose.world_to_camera_point(&prim.position);
    if t.z <= cfg.near {
        return None;
    }
    let (fx, fy) = (intr.fx, intr.fy);
    let iz = 1.0 / t.z;
    let j = Matrix2x3::new(fx * iz, 0.0, -fx * t.x * iz * iz, 0.0, fy * iz, -fy * t.y * iz * iz);
    let jw = j * pose.rotation();
    let cov3d = covariance3d(&prim.scale, &prim.rotation);
    let s2 = jw * cov3d * jw.transpose();
    let (a, b, c) = (s2[(0, 0)] + cfg.blur_floor, s2[(0, 1)], s2[(1, 1)] + cfg.blur_floor);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let mean2d = [fx * t.x * iz + intr.cx, fy * t.y * iz + intr.cy];
    let ext_u = cfg.sigma_cutoff * a.sqrt() + 1.0;
    let ext_v = cfg.sigma_cutoff * c.sqrt() + 1.0;
    let (w, h) = (intr.width as f64, intr.height as f64);
    let u0 = (mean2d[0] - ext_u).ceil().max(0.0);
    let u1 = (mean2d[0] + ext_u).floor().min(w - 1.0);
    let v0 = (mean2d[1] - ext_v).ceil().max(0.0);
    let v1 = (mean2d[1] + ext_v).floor().min(h - 1.0);
    if !(u0 <= u1 && v0 <= v1) {
        return None;
    }
    let offset = prim.position - pose.center();
    let dist = offset.norm();
    let dir = if dist > 0.0 { offset / dist } else { Vector3::z() };
    let raw_color = eval_sh(&prim.sh, &dir);
    Some(Gaussian2D {
        index,
        mean2d,
        cov2d: [a, b, c],
        conic: [c / det, -b / det, a / det],
        depth_cam: t.z,
        color: raw_color.map(|v| v.clamp(0.0, 1.0)),
        opacity: prim.opacity,
        bounds: [u0 as usize, u1 as usize, v0 as usize, v1 as usize],
        t_cam: t,
        raw_color,
        dir,
        dist,
        jw,
        cov3d,
    })
}

/// Footprint of `g` at pixel `(u, v)`: `(f, exp term, du, dv)`, or `None`
/// beyond the sigma cutoff or below the opacity cutoff.
#[inline]
fn footprint(g: &Gaussian2D, u: f64, v: f64, cfg: &RenderConfig) -> Option<(f64, f64, f64, f64)> {
    let du = u - g.mean2d[0];
    let dv = v - g.mean2d[1];
    let [a, b, c] = g.conic;
    let m2 = a * du * du + 2.0 * b * du * dv + c * dv * dv;
    if m2 > cfg.sigma_cutoff * cfg.sigma_cutoff {
        return None;
    }
    let e = (-0.5 * m2).exp();
    let f = (g.opacity * e).min(MAX_ALPHA);
    if f < cfg.opacity_cutoff {
        return None;
    }
    Some((f, e, du, dv))
}

/// One term of the compositing sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub weight: f64,
    pub color: [f64; 3],
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositedPixel {
    pub color: [f64; 3],
    pub alpha: f64,
    pub depth: f64,
    /// Final transmittance; `alpha + transmittance = 1`.
    pub transmittance: f64,
    /// Number of contributors consumed before early termination.
    pub used: usize,
}

/// Front-to-back compositing over `background`.
pub fn composite_pixel(contributions: &[Contribution], background: [f64; 3]) -> CompositedPixel {
    debug_assert!(contributions.windows(2).all(|p| p[0].depth <= p[1].depth), "contributions not depth sorted");
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut used = 0;
    for c in contributions {
        let w = c.weight * t;
        for ch in 0..3 {
            color[ch] += w * c.color[ch];
        }
        depth += w * c.depth;
        t *= 1.0 - c.weight;
        used += 1;
        if t < TRANSMITTANCE_EPS {
            break;
        }
    }
    for ch in 0..3 {
        color[ch] += t * background[ch];
    }
    CompositedPixel { color, alpha: 1.0 - t, depth, transmittance: t, used }
}

/// Per-pixel contributor lists kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderCache {
    pub projected: Vec<Option<Gaussian2D>>,
    /// Primitive indices per pixel, front to back, concatenated.
    pub contributors: Vec<u32>,
    /// Start of each pixel's run in `contributors`; length `W·H + 1`.
    pub offsets: Vec<usize>,
}

impl RenderCache {
    pub fn pixel_contributors(&self, pixel: usize) -> &[u32] {
        &self.contributors[self.offsets[pixel]..self.offsets[pixel + 1]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub cache: Option<RenderCache>,
}

impl RenderedFrame {
    pub fn to_frame(&self) -> RgbFrame {
        RgbFrame { width: self.width, height: self.height, data: self.color.clone() }
    }
}

/// Renders without keeping contributor lists.
pub fn render(prims: &[GaussianPrimitive], intr: &CameraIntrinsics, pose: &CameraPose, cfg: &RenderConfig) -> RenderedFrame {
    render_impl(prims, intr, pose, cfg, false)
}

/// Renders and keeps what [`render_backward`] needs.
pub fn render_with_cache(prims: &[GaussianPrimitive], intr: &CameraIntrinsics, pose: &CameraPose, cfg: &RenderConfig) -> RenderedFrame {
    render_impl(prims, intr, pose, cfg, true)
}

fn render_impl(prims: &[GaussianPrimitive], intr: &CameraIntrinsics, pose: &CameraPose, cfg: &RenderConfig, keep: bool) -> RenderedFrame {
    let (w, h) = (intr.width, intr.height);
    let projected: Vec<Option<Gaussian2D>> =
        prims.iter().enumerate().map(|(i, p)| project_gaussian(i, p, intr, pose, cfg)).collect();

    let ts = cfg.tile_size;
    let (tiles_x, tiles_y) = (w.div_ceil(ts), h.div_ceil(ts));
    let mut tiles: Vec<Vec<usize>> = vec![Vec::new(); tiles_x * tiles_y];
    for g in projected.iter().flatten() {
        let [u0, u1, v0, v1] = g.bounds;
        for ty in v0 / ts..=v1 / ts {
            for tx in u0 / ts..=u1 / ts {
                tiles[ty * tiles_x + tx].push(g.index);
            }
        }
    }
    let depth_of = |i: usize| projected[i].as_ref().map_or(f64::INFINITY, |g| g.depth_cam);
    for list in &mut tiles {
        list.sort_by(|&a, &b| depth_of(a).total_cmp(&depth_of(b)).then(a.cmp(&b)));
    }

    let mut color = vec![0.0; w * h * 3];
    let mut depth = vec![0.0; w * h];
    let mut alpha = vec![0.0; w * h];
    let mut per_pixel: Vec<Vec<u32>> = if keep { vec![Vec::new(); w * h] } else { Vec::new() };
    let mut contribs = Vec::new();
    let mut ids = Vec::new();
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let list = &tiles[ty * tiles_x + tx];
            for v in ty * ts..((ty + 1) * ts).min(h) {
                for u in tx * ts..((tx + 1) * ts).min(w) {
                    contribs.clear();
                    ids.clear();
                    for &i in list {
                        let g = projected[i].as_ref().expect("binned primitives are visible");
                        if let Some((f, ..)) = footprint(g, u as f64, v as f64, cfg) {
                            contribs.push(Contribution { weight: f, color: g.color, depth: g.depth_cam });
                            ids.push(i as u32);
                        }
                    }
                    let px = composite_pixel(&contribs, cfg.background);
                    let p = v * w + u;
                    color[3 * p..3 * p + 3].copy_from_slice(&px.color);
                    depth[p] = px.depth;
                    alpha[p] = px.alpha;
                    if keep {
                        per_pixel[p] = ids[..px.used].to_vec();
                    }
                }
            }
        }
    }
    let cache = keep.then(|| {
        let mut offsets = Vec::with_capacity(w * h + 1);
        let mut contributors = Vec::new();
        offsets.push(0);
        for list in per_pixel {
            contributors.extend(list);
            offsets.push(contributors.len());
        }
        RenderCache { projected, contributors, offsets }
    });
    RenderedFrame { width: w, height: h, color, depth, alpha, cache }
}

/// Gradients of every primitive given `dL/dcolor` per pixel channel.
/// Culled primitives receive exactly zero.
pub fn render_backward(
    frame: &RenderedFrame,
    prims: &[GaussianPrimitive],
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    cfg: &RenderConfig,
    d_color: &[f64],
) -> Result<Vec<GaussianGrad>> {
    let cache = frame.cache.as_ref().ok_or(Error::MissingContributorCache)?;
    if d_color.len() != frame.color.len() {
        return Err(Error::dims("render_backward upstream gradient", frame.color.len(), d_color.len()));
    }
    if cache.projected.len() != prims.len() {
        return Err(Error::dims("render_backward primitive count", cache.projected.len(), prims.len()));
    }
    let n = prims.len();
    let mut d_mean = vec![[0.0; 2]; n];
    let mut d_conic = vec![[0.0; 3]; n];
    let mut d_rgb = vec![[0.0; 3]; n];
    let mut d_opacity = vec![0.0; n];

    let mut trans = Vec::new();
    let mut fps = Vec::new();
    for v in 0..frame.height {
        for u in 0..frame.width {
            let p = v * frame.width + u;
            let ids = cache.pixel_contributors(p);
            if ids.is_empty() {
                continue;
            }
            let dc = &d_color[3 * p..3 * p + 3];
            trans.clear();
            fps.clear();
            let mut t = 1.0;
            for &i in ids {
                let g = cache.projected[i as usize].as_ref().expect("contributors are visible");
                let fp = footprint(g, u as f64, v as f64, cfg).expect("cached contributor has a footprint");
                trans.push(t);
                t *= 1.0 - fp.0;
                fps.push(fp);
            }
            let mut behind = cfg.background;
            for k in (0..ids.len()).rev() {
                let i = ids[k] as usize;
                let g = cache.projected[i].as_ref().expect("contributors are visible");
                let (f, e, du, dv) = fps[k];
                let tk = trans[k];
                let mut df = 0.0;
                for ch in 0..3 {
                    d_rgb[i][ch] += dc[ch] * f * tk;
                    df += dc[ch] * tk * (g.color[ch] - behind[ch]);
                    behind[ch] = f * g.color[ch] + (1.0 - f) * behind[ch];
                }
                if g.opacity * e >= MAX_ALPHA {
                    continue;
                }
                d_opacity[i] += df * e;
                let dm2 = -0.5 * df * g.opacity * e;
                let [a, b, c] = g.conic;
                d_conic[i][0] += dm2 * du * du;
                d_conic[i][1] += dm2 * 2.0 * du * dv;
                d_conic[i][2] += dm2 * dv * dv;
                d_mean[i][0] -= dm2 * (2.0 * a * du + 2.0 * b * dv);
                d_mean[i][1] -= dm2 * (2.0 * b * du + 2.0 * c * dv);
            }
        }
    }

    let w_rot = pose.rotation();
    let mut grads = vec![GaussianGrad::default(); n];
    for (i, g) in cache.projected.iter().enumerate() {
        let Some(g) = g else { continue };
        let prim = &prims[i];
        let out = &mut grads[i];
        out.opacity = d_opacity[i];

        // Color through the clamp and the SH basis.
        let basis = sh_basis(&g.dir);
        let mut d_raw = [0.0; 3];
        for ch in 0..3 {
            if g.raw_color[ch] > 0.0 && g.raw_color[ch] < 1.0 {
                d_raw[ch] = d_rgb[i][ch];
            }
        }
        for k in 0..SH_COEFFS {
            for ch in 0..3 {
                out.sh[k][ch] = basis[k] * d_raw[ch];
            }
        }
        let mut d_dir = Vector3::zeros();
        for ch in 0..3 {
            d_dir.x -= SH_C1 * prim.sh[3][ch] * d_raw[ch];
            d_dir.y -= SH_C1 * prim.sh[1][ch] * d_raw[ch];
            d_dir.z += SH_C1 * prim.sh[2][ch] * d_raw[ch];
        }
        let mut d_pos = if g.dist > 0.0 { (d_dir - g.dir * g.dir.dot(&d_dir)) / g.dist } else { Vector3::zeros() };

        // Conic -> screen covariance.
        let [ca, cb, cc] = g.conic;
        let q = Matrix2::new(ca, cb, cb, cc);
        let gq = Matrix2::new(d_conic[i][0], 0.5 * d_conic[i][1], 0.5 * d_conic[i][1], d_conic[i][2]);
        let g2 = -(q * gq * q);
        // Screen covariance -> projection matrix and 3D covariance.
        let d_cov3 = g.jw.transpose() * g2 * g.jw;
        let d_jw = 2.0 * g2 * g.jw * g.cov3d;
        let dj = d_jw * w_rot.transpose();

        let (fx, fy) = (intr.fx, intr.fy);
        let t = g.t_cam;
        let iz = 1.0 / t.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let mut dt = Vector3::new(
            d_mean[i][0] * fx * iz,
            d_mean[i][1] * fy * iz,
            -d_mean[i][0] * fx * t.x * iz2 - d_mean[i][1] * fy * t.y * iz2,
        );
        dt.x += dj[(0, 2)] * (-fx * iz2);
        dt.y += dj[(1, 2)] * (-fy * iz2);
        dt.z += dj[(0, 0)] * (-fx * iz2) + dj[(0, 2)] * (2.0 * fx * t.x * iz3) + dj[(1, 1)] * (-fy * iz2) + dj[(1, 2)] * (2.0 * fy * t.y * iz3);
        d_pos += w_rot.transpose() * dt;
        out.position = d_pos;

        // 3D covariance -> scale and rotation.
        let r = rotation_matrix(&prim.rotation);
        let m = r * Matrix3::from_diagonal(&prim.scale);
        let d_m = 2.0 * d_cov3 * m;
        for a in 0..3 {
            let mut s = 0.0;
            for row in 0..3 {
                s += d_m[(row, a)] * r[(row, a)];
            }
            out.scale[a] = s;
        }
        let d_r = d_m * Matrix3::from_diagonal(&prim.scale);
        out.rotation = rotation_backward(&prim.rotation, &d_r);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera(w: usize, h: usize) -> (CameraIntrinsics, CameraPose) {
        (
            CameraIntrinsics::new(40.0, 40.0, w as f64 / 2.0 - 0.5, h as f64 / 2.0 - 0.5, w, h).unwrap(),
            CameraPose::identity(),
        )
    }

    #[test]
    fn covariance_closed_forms() {
        let c = covariance3d(&Vector3::new(1.0, 2.0, 3.0), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(c, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c = covariance3d(&Vector3::new(1.0, 2.0, 1.0), &[h, 0.0, 0.0, h]);
        assert!((c - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn composite_single_and_occluded() {
        let c = composite_pixel(&[Contribution { weight: 0.4, color: [1.0, 0.5, 0.0], depth: 2.0 }], [0.0; 3]);
        assert_eq!(c.color, [0.4, 0.2, 0.0]);
        assert_eq!(c.alpha, 0.4);
        let c = composite_pixel(
            &[
                Contribution { weight: 1.0, color: [0.1, 0.2, 0.3], depth: 1.0 },
                Contribution { weight: 1.0, color: [0.9, 0.9, 0.9], depth: 2.0 },
            ],
            [0.0; 3],
        );
        assert_eq!(c.color, [0.1, 0.2, 0.3]);
    }

    #[test]
    fn empty_cloud_renders_background() {
        let (intr, pose) = camera(8, 8);
        let cfg = RenderConfig { background: [0.2, 0.3, 0.4], ..Default::default() };
        let f = render(&[], &intr, &pose, &cfg);
        assert!(f.alpha.iter().all(|a| *a == 0.0));
        assert!(f.color.chunks(3).all(|c| c == [0.2, 0.3, 0.4]));
    }

    #[test]
    fn behind_camera_is_culled() {
        let (intr, pose) = camera(8, 8);
        let g = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, -1.0), 0.1, 0.9, [1.0; 3]);
        assert!(project_gaussian(0, &g, &intr, &pose, &RenderConfig::default()).is_none());
    }

    #[test]
    fn principal_ray_projection() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 50.0, 40.0, 100, 80).unwrap();
        let g = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 4.0), 0.2, 0.9, [0.5; 3]);
        let cfg = RenderConfig::default();
        let p = project_gaussian(0, &g, &intr, &CameraPose::identity(), &cfg).unwrap();
        assert_eq!(p.mean2d, [50.0, 40.0]);
        let expect = (100.0 * 0.2 / 4.0f64).powi(2) + 0.3;
        assert!((p.cov2d[0] - expect).abs() < 1e-12 && (p.cov2d[2] - expect).abs() < 1e-12);
        assert!(p.cov2d[1].abs() < 1e-12);
    }
}
