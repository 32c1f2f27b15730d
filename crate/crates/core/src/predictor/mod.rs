//! Local attribute prediction: dual projection of anchor features, one of
//! four neighborhood aggregation heads, and regression to raw Gaussian
//! attributes with their activations.

mod heads;
mod layers;
mod weights;

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianGrad, GaussianPrimitive, SH_COEFFS};
use crate::geometry::{AnchorCloud, GEO_FEATURE_DIM};
use crate::neighborhood::NeighborSet;

pub use heads::{head_backward, head_forward, HeadCache, HeadPass, InputGrads};
pub use weights::{init_weights, load_weights, save_weights, Tensor, WeightBundle};

use layers::{affine, affine_backward, all_finite, relu, relu_backward};
use weights::InitKind;

/// Raw attribute width: opacity logit, 3 log-scales, 4 quaternion, 12 SH.
pub const RAW_DIM: usize = 20;
/// Default lower scale bound, scene units.
pub const DEFAULT_S_MIN: f64 = 1e-4;
/// Default upper scale bound as a fraction of the cloud's bounding-box diagonal.
pub const S_MAX_FRACTION: f64 = 0.1;
const QUAT_EPS: f64 = 1e-12;
/// Opacities are kept this far inside (0, 1); the sigmoid saturates to
/// exactly 0 or 1 in floating point for large logits.
pub const OPACITY_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    GeoAttention,
    Mlp,
    EdgeConv,
    PointNet,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 4] = [HeadVariant::GeoAttention, HeadVariant::Mlp, HeadVariant::EdgeConv, HeadVariant::PointNet];

    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::GeoAttention => "geo_attention",
            HeadVariant::Mlp => "mlp",
            HeadVariant::EdgeConv => "edgeconv",
            HeadVariant::PointNet => "pointnet",
        }
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geo_attention" | "attention" => Ok(HeadVariant::GeoAttention),
            "mlp" => Ok(HeadVariant::Mlp),
            "edgeconv" | "edge_conv" => Ok(HeadVariant::EdgeConv),
            "pointnet" | "point_net" => Ok(HeadVariant::PointNet),
            other => Err(Error::InvalidConfig(format!(
                "unknown head variant {other:?} (expected geo_attention, mlp, edgeconv or pointnet)"
            ))),
        }
    }
}

/// Architecture of a prediction head. Only the fields of the selected
/// variant shape the weights; the rest are carried for round trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    /// Appearance feature width, taken from the scene's feature maps.
    pub d_v: usize,
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub pos_hidden: usize,
    pub mlp_widths: Vec<usize>,
    pub pointnet_shared: Vec<usize>,
    pub pointnet_head: Vec<usize>,
    pub edgeconv_channels: Vec<usize>,
    pub regress_hidden: usize,
}

impl Default for HeadConfig {
    /// Full attention head with `d_v` unset.
    fn default() -> Self {
        HeadConfig::full(HeadVariant::GeoAttention, 0)
    }
}

impl HeadConfig {
    /// Full-size architecture.
    pub fn full(variant: HeadVariant, d_v: usize) -> Self {
        HeadConfig {
            variant,
            d_v,
            d_h: 128,
            layers: 3,
            heads: 4,
            ffn_expansion: 4,
            pos_hidden: 32,
            mlp_widths: vec![512, 512, 256, 64],
            pointnet_shared: vec![128, 256, 512, 1024],
            pointnet_head: vec![512, 256],
            edgeconv_channels: vec![64, 128, 256],
            regress_hidden: 128,
        }
    }

    /// Shrunk architecture used by gradient checks and toy training.
    pub fn compact(variant: HeadVariant, d_v: usize) -> Self {
        HeadConfig {
            variant,
            d_v,
            d_h: 16,
            layers: 3,
            heads: 4,
            ffn_expansion: 4,
            pos_hidden: 8,
            mlp_widths: vec![32, 32, 16, 8],
            pointnet_shared: vec![16, 32, 32, 64],
            pointnet_head: vec![32, 16],
            edgeconv_channels: vec![8, 16, 16],
            regress_hidden: 16,
        }
    }

    /// Width of the unified feature `[φ_g(g); φ_v(v)]`.
    pub fn width(&self) -> usize {
        2 * self.d_h
    }

    /// Width of the aggregated feature handed to the regression MLP.
    pub fn agg_dim(&self) -> usize {
        match self.variant {
            HeadVariant::GeoAttention => self.width(),
            HeadVariant::Mlp => *self.mlp_widths.last().unwrap_or(&0),
            HeadVariant::EdgeConv => self.edgeconv_channels.iter().sum(),
            HeadVariant::PointNet => *self.pointnet_head.last().or(self.pointnet_shared.last()).unwrap_or(&0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_v == 0 || self.d_h == 0 || self.regress_hidden == 0 {
            return bad("d_v, d_h and regress_hidden must be positive".into());
        }
        match self.variant {
            HeadVariant::GeoAttention => {
                if self.layers == 0 || self.heads == 0 || self.ffn_expansion == 0 || self.pos_hidden == 0 {
                    return bad("attention layers, heads, ffn_expansion and pos_hidden must be positive".into());
                }
                if self.d_h % self.heads != 0 {
                    return bad(format!("head count {} does not divide d_h {}", self.heads, self.d_h));
                }
            }
            HeadVariant::Mlp => check_widths("mlp_widths", &self.mlp_widths, false)?,
            HeadVariant::EdgeConv => check_widths("edgeconv_channels", &self.edgeconv_channels, false)?,
            HeadVariant::PointNet => {
                check_widths("pointnet_shared", &self.pointnet_shared, false)?;
                check_widths("pointnet_head", &self.pointnet_head, true)?;
            }
        }
        Ok(())
    }

    /// FNV-1a over the JSON form; stored in weight files.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        json.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }

    /// Every tensor this config needs, in storage order.
    pub(crate) fn tensor_layout(&self) -> Vec<(String, Vec<usize>, InitKind)> {
        let mut out = Vec::new();
        let w = self.width();
        push_linear(&mut out, "project.geo", GEO_FEATURE_DIM, self.d_h);
        push_linear(&mut out, "project.app", self.d_v, self.d_h);
        match self.variant {
            HeadVariant::GeoAttention => {
                for l in 0..self.layers {
                    let p = format!("attn.{l}");
                    push_linear(&mut out, &format!("{p}.query"), w, self.d_h);
                    push_linear(&mut out, &format!("{p}.key"), w, self.d_h);
                    push_linear(&mut out, &format!("{p}.value"), w, self.d_h);
                    push_linear(&mut out, &format!("{p}.pos0"), 3, self.pos_hidden);
                    push_linear(&mut out, &format!("{p}.pos1"), self.pos_hidden, self.d_h);
                    push_linear(&mut out, &format!("{p}.out"), self.d_h, w);
                    push_norm(&mut out, &format!("{p}.norm1"), w);
                    push_linear(&mut out, &format!("{p}.ffn0"), w, self.ffn_expansion * w);
                    push_linear(&mut out, &format!("{p}.ffn1"), self.ffn_expansion * w, w);
                    push_norm(&mut out, &format!("{p}.norm2"), w);
                }
            }
            HeadVariant::Mlp => {
                let mut fan_in = 2 * w + 3;
                for (i, &width) in self.mlp_widths.iter().enumerate() {
                    push_linear(&mut out, &format!("mlp.{i}"), fan_in, width);
                    fan_in = width;
                }
            }
            HeadVariant::EdgeConv => {
                let mut c = w;
                for (l, &width) in self.edgeconv_channels.iter().enumerate() {
                    push_linear(&mut out, &format!("edge.{l}"), 2 * c, width);
                    c = width;
                }
            }
            HeadVariant::PointNet => {
                let mut fan_in = w + 3;
                for (i, &width) in self.pointnet_shared.iter().enumerate() {
                    push_linear(&mut out, &format!("pointnet.shared.{i}"), fan_in, width);
                    fan_in = width;
                }
                for (i, &width) in self.pointnet_head.iter().enumerate() {
                    push_linear(&mut out, &format!("pointnet.head.{i}"), fan_in, width);
                    fan_in = width;
                }
            }
        }
        push_linear(&mut out, "regress.0", self.agg_dim(), self.regress_hidden);
        push_linear(&mut out, "regress.1", self.regress_hidden, RAW_DIM);
        out
    }
}

fn check_widths(name: &str, widths: &[usize], may_be_empty: bool) -> Result<()> {
    if (!may_be_empty && widths.is_empty()) || widths.contains(&0) {
        return Err(Error::InvalidConfig(format!("{name} must be a list of positive widths, got {widths:?}")));
    }
    Ok(())
}

fn push_linear(out: &mut Vec<(String, Vec<usize>, InitKind)>, prefix: &str, n_in: usize, n_out: usize) {
    out.push((format!("{prefix}.weight"), vec![n_out, n_in], InitKind::He { fan_in: n_in }));
    out.push((format!("{prefix}.bias"), vec![n_out], InitKind::Zeros));
}

fn push_norm(out: &mut Vec<(String, Vec<usize>, InitKind)>, prefix: &str, n: usize) {
    out.push((format!("{prefix}.gain"), vec![n], InitKind::Ones));
    out.push((format!("{prefix}.bias"), vec![n], InitKind::Zeros));
}

/// `[φ_g(g); φ_v(v)]`.
pub fn dual_project(g: &[f64], v: &[f64], config: &HeadConfig, weights: &WeightBundle) -> Result<Vec<f64>> {
    if g.len() != GEO_FEATURE_DIM {
        return Err(Error::dims("dual_project geometric feature", GEO_FEATURE_DIM, g.len()));
    }
    if v.len() != config.d_v {
        return Err(Error::dims("dual_project appearance feature", config.d_v, v.len()));
    }
    let (wg, bg) = weights.linear("project.geo");
    let (wv, bv) = weights.linear("project.app");
    let mut f = affine(wg, bg, g);
    f.extend(affine(wv, bv, v));
    if !all_finite(&f) {
        return Err(Error::NonFiniteActivation { layer: "project".into() });
    }
    Ok(f)
}

/// Accumulates projection weight gradients for upstream `df`.
pub fn dual_project_backward(g: &[f64], v: &[f64], weights: &WeightBundle, df: &[f64], grads: &mut WeightBundle) {
    let d_h = df.len() / 2;
    let (wg, _) = weights.linear("project.geo");
    let (dw, db) = grads.linear_mut("project.geo");
    affine_backward(wg, g, &df[..d_h], None, dw, db);
    let (wv, _) = weights.linear("project.app");
    let (dw, db) = grads.linear_mut("project.app");
    affine_backward(wv, v, &df[d_h..], None, dw, db);
}

/// Unified features of every anchor, in cloud order.
pub fn project_cloud(cloud: &AnchorCloud, config: &HeadConfig, weights: &WeightBundle) -> Result<Vec<Vec<f64>>> {
    cloud.anchors.iter().map(|a| dual_project(&a.geo, &a.appearance, config, weights)).collect()
}

/// The center feature, its neighbors' features and their relative offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodFeatures {
    pub center: Vec<f64>,
    pub neighbors: Vec<Vec<f64>>,
    pub offsets: Vec<Vector3<f64>>,
}

impl NeighborhoodFeatures {
    /// Assembles the set from precomputed unified features.
    pub fn from_projected(neighbors: &NeighborSet, projected: &[Vec<f64>]) -> Self {
        NeighborhoodFeatures {
            center: projected[neighbors.center].clone(),
            neighbors: neighbors.indices.iter().map(|&j| projected[j].clone()).collect(),
            offsets: neighbors.offsets.clone(),
        }
    }

    /// Neighbor count, excluding the center.
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

/// Projects the center and each neighbor of `neighbors`.
pub fn gather_neighborhood(
    cloud: &AnchorCloud,
    neighbors: &NeighborSet,
    config: &HeadConfig,
    weights: &WeightBundle,
) -> Result<NeighborhoodFeatures> {
    let proj = |i: usize| {
        let a = &cloud.anchors[i];
        dual_project(&a.geo, &a.appearance, config, weights)
    };
    Ok(NeighborhoodFeatures {
        center: proj(neighbors.center)?,
        neighbors: neighbors.indices.iter().map(|&j| proj(j)).collect::<Result<_>>()?,
        offsets: neighbors.offsets.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawAttributes(pub [f64; RAW_DIM]);

impl RawAttributes {
    pub fn opacity_logit(&self) -> f64 {
        self.0[0]
    }

    pub fn log_scale(&self) -> [f64; 3] {
        [self.0[1], self.0[2], self.0[3]]
    }

    pub fn quaternion(&self) -> [f64; 4] {
        [self.0[4], self.0[5], self.0[6], self.0[7]]
    }

    /// `sh[k][c] = raw[8 + 3k + c]`.
    pub fn sh(&self) -> [[f64; 3]; SH_COEFFS] {
        let mut sh = [[0.0; 3]; SH_COEFFS];
        for (k, row) in sh.iter_mut().enumerate() {
            row.copy_from_slice(&self.0[8 + 3 * k..11 + 3 * k]);
        }
        sh
    }
}

/// Two-layer regression from the aggregated feature to raw attributes.
pub fn regress_attributes(agg: &[f64], weights: &WeightBundle) -> Result<RawAttributes> {
    let (w0, b0) = weights.linear("regress.0");
    if agg.len() * b0.len() != w0.len() {
        return Err(Error::dims("regress_attributes input", w0.len() / b0.len().max(1), agg.len()));
    }
    let (w1, b1) = weights.linear("regress.1");
    let hidden = relu(&affine(w0, b0, agg));
    let out = affine(w1, b1, &hidden);
    if !all_finite(&out) {
        return Err(Error::NonFiniteActivation { layer: "regress".into() });
    }
    let mut raw = [0.0; RAW_DIM];
    raw.copy_from_slice(&out);
    Ok(RawAttributes(raw))
}

/// Accumulates regression weight gradients and returns `d agg`.
pub fn regress_backward(agg: &[f64], weights: &WeightBundle, d_raw: &[f64; RAW_DIM], grads: &mut WeightBundle) -> Vec<f64> {
    let (w0, b0) = weights.linear("regress.0");
    let (w1, _) = weights.linear("regress.1");
    let pre = affine(w0, b0, agg);
    let hidden = relu(&pre);
    let mut d_hidden = vec![0.0; hidden.len()];
    {
        let (dw, db) = grads.linear_mut("regress.1");
        affine_backward(w1, &hidden, d_raw, Some(&mut d_hidden), dw, db);
    }
    let d_pre = relu_backward(&pre, &d_hidden);
    let mut d_agg = vec![0.0; agg.len()];
    let (dw, db) = grads.linear_mut("regress.0");
    affine_backward(w0, agg, &d_pre, Some(&mut d_agg), dw, db);
    d_agg
}

/// Scale clamp range applied by [`activate_attributes`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationBounds {
    pub s_min: f64,
    pub s_max: f64,
}

impl ActivationBounds {
    /// `s_max` is a tenth of the bounding-box diagonal, never below `s_min`.
    pub fn for_extent(bbox_diagonal: f64) -> Self {
        ActivationBounds { s_min: DEFAULT_S_MIN, s_max: (S_MAX_FRACTION * bbox_diagonal).max(DEFAULT_S_MIN) }
    }

    pub fn for_cloud(cloud: &AnchorCloud) -> Self {
        Self::for_extent(cloud.bbox_diagonal())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(q / |q|, |q|)` computed without overflow; the norm may still be
/// infinite, in which case gradients through it vanish.
fn unit_quaternion(q: &[f64; 4]) -> ([f64; 4], f64) {
    let m = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 {
        return ([1.0, 0.0, 0.0, 0.0], 0.0);
    }
    let s = q.map(|v| v / m);
    let k = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    (s.map(|v| v / k), m * k)
}

/// Sigmoid opacity, clamped exponential scales, normalized quaternion.
pub fn activate_attributes(raw: &RawAttributes, position: Vector3<f64>, bounds: &ActivationBounds) -> GaussianPrimitive {
    let ls = raw.log_scale();
    let scale = Vector3::new(
        ls[0].exp().clamp(bounds.s_min, bounds.s_max),
        ls[1].exp().clamp(bounds.s_min, bounds.s_max),
        ls[2].exp().clamp(bounds.s_min, bounds.s_max),
    );
    let (u, n) = unit_quaternion(&raw.quaternion());
    let opacity = sigmoid(raw.opacity_logit()).clamp(OPACITY_MARGIN, 1.0 - OPACITY_MARGIN);
    GaussianPrimitive { position, opacity, scale, rotation: if n < QUAT_EPS { [1.0, 0.0, 0.0, 0.0] } else { u }, sh: raw.sh() }
}

/// Chains a primitive gradient back to the raw vector. Position gradients
/// are dropped since anchors are not displaced.
pub fn activate_backward(raw: &RawAttributes, bounds: &ActivationBounds, grad: &GaussianGrad) -> [f64; RAW_DIM] {
    let mut d = [0.0; RAW_DIM];
    let a = sigmoid(raw.opacity_logit());
    if a > OPACITY_MARGIN && a < 1.0 - OPACITY_MARGIN {
        d[0] = grad.opacity * a * (1.0 - a);
    }
    for (i, ls) in raw.log_scale().into_iter().enumerate() {
        let s = ls.exp();
        if s > bounds.s_min && s < bounds.s_max {
            d[1 + i] = grad.scale[i] * s;
        }
    }
    let (u, n) = unit_quaternion(&raw.quaternion());
    if n >= QUAT_EPS {
        let dot: f64 = (0..4).map(|i| u[i] * grad.rotation[i]).sum();
        for i in 0..4 {
            d[4 + i] = (grad.rotation[i] - u[i] * dot) / n;
        }
    }
    for k in 0..SH_COEFFS {
        for c in 0..3 {
            d[8 + 3 * k + c] = grad.sh[k][c];
        }
    }
    d
}

/// Runs the head and regression for every neighbor set, in order.
pub fn predict_raw(
    projected: &[Vec<f64>],
    neighbor_sets: &[NeighborSet],
    config: &HeadConfig,
    weights: &WeightBundle,
) -> Result<Vec<RawAttributes>> {
    neighbor_sets
        .iter()
        .map(|ns| {
            let feats = NeighborhoodFeatures::from_projected(ns, projected);
            let pass = head_forward(&feats, config, weights, false)?;
            regress_attributes(&pass.output, weights)
        })
        .collect()
}

/// Full prediction for a cloud: projection, head, regression, activation.
pub fn predict_gaussians(
    cloud: &AnchorCloud,
    neighbor_sets: &[NeighborSet],
    config: &HeadConfig,
    weights: &WeightBundle,
    bounds: &ActivationBounds,
) -> Result<Vec<GaussianPrimitive>> {
    let projected = project_cloud(cloud, config, weights)?;
    let raws = predict_raw(&projected, neighbor_sets, config, weights)?;
    Ok(raws
        .iter()
        .zip(&cloud.anchors)
        .map(|(r, a)| activate_attributes(r, a.position, bounds))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_closed_forms() {
        let b = ActivationBounds { s_min: 1e-4, s_max: 0.5 };
        let p = activate_attributes(&RawAttributes([0.0; RAW_DIM]), Vector3::zeros(), &b);
        assert_eq!(p.opacity, 0.5);
        assert_eq!(p.scale, Vector3::new(0.5, 0.5, 0.5));
        assert_eq!(p.rotation, [1.0, 0.0, 0.0, 0.0]);
        let mut raw = [0.0; RAW_DIM];
        raw[7] = 2.0;
        raw[1] = -20.0;
        let p = activate_attributes(&RawAttributes(raw), Vector3::zeros(), &b);
        assert_eq!(p.rotation, [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(p.scale.x, 1e-4);
    }

    #[test]
    fn activation_backward_matches_fd() {
        let b = ActivationBounds { s_min: 1e-4, s_max: 10.0 };
        let raw = [0.3, -0.2, 0.1, 0.5, 0.9, -0.4, 0.2, 0.7, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2];
        let g = GaussianGrad {
            position: Vector3::zeros(),
            opacity: 0.7,
            scale: Vector3::new(0.3, -1.1, 0.4),
            rotation: [0.2, -0.5, 0.9, 0.1],
            sh: [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9], [1.0, 1.1, 1.2]],
        };
        let loss = |r: &[f64; RAW_DIM]| {
            let p = activate_attributes(&RawAttributes(*r), Vector3::zeros(), &b);
            let mut l = g.opacity * p.opacity;
            for i in 0..3 {
                l += g.scale[i] * p.scale[i];
            }
            for i in 0..4 {
                l += g.rotation[i] * p.rotation[i];
            }
            for k in 0..4 {
                for c in 0..3 {
                    l += g.sh[k][c] * p.sh[k][c];
                }
            }
            l
        };
        let d = activate_backward(&RawAttributes(raw), &b, &g);
        for i in 0..RAW_DIM {
            let (mut a, mut c) = (raw, raw);
            a[i] += 1e-6;
            c[i] -= 1e-6;
            let fd = (loss(&a) - loss(&c)) / 2e-6;
            assert!((fd - d[i]).abs() < 1e-7, "raw {i}: fd {fd} vs {}", d[i]);
        }
    }

    #[test]
    fn layout_matches_init_and_hash_is_stable() {
        for v in HeadVariant::ALL {
            let cfg = HeadConfig::compact(v, 27);
            let w = init_weights(&cfg, 3).unwrap();
            assert_eq!(w.len(), cfg.tensor_layout().len());
            assert_eq!(cfg.hash(), cfg.clone().hash());
            assert_ne!(cfg.hash(), HeadConfig::full(v, 27).hash());
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = HeadConfig::compact(HeadVariant::GeoAttention, 27);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
    }
}
