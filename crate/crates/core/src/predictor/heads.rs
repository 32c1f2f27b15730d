//! Forward and backward passes of the four aggregation heads.
//!
//! Neighbors are put in a canonical order (offset, then feature values) before
//! any reduction, so every head is exactly invariant to the caller's neighbor
//! order. Gradients are mapped back to the caller's order.

use std::cmp::Ordering;

use nalgebra::Vector3;

use super::layers::{affine, affine_backward, all_finite, layer_norm, layer_norm_backward, relu, relu_backward, LayerNormCache};
use super::{HeadConfig, HeadVariant, NeighborhoodFeatures, WeightBundle};
use crate::error::{Error, Result};

/// Head output plus, when requested, everything backward needs.
#[derive(Debug, Clone)]
pub struct HeadPass {
    pub output: Vec<f64>,
    pub cache: Option<HeadCache>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    /// `perm[i]` is the caller index of the i-th canonical neighbor.
    perm: Vec<usize>,
    neighbors: Vec<Vec<f64>>,
    offsets: Vec<[f64; 3]>,
    inner: Inner,
}

impl HeadCache {
    /// Attention weights `[layer][head][attendee]`; attendee 0 is the center,
    /// the rest follow the canonical neighbor order.
    pub fn attention_weights(&self) -> Option<Vec<&[Vec<f64>]>> {
        match &self.inner {
            Inner::Attention(layers) => Some(layers.iter().map(|l| l.alpha.as_slice()).collect()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
enum Inner {
    Attention(Vec<AttnCache>),
    Mlp(MlpCache),
    Edge(Vec<EdgeCache>),
    PointNet(PointNetCache),
}

/// Gradients with respect to the head inputs, in the caller's order.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    pub center: Vec<f64>,
    pub neighbors: Vec<Vec<f64>>,
    pub offsets: Vec<Vector3<f64>>,
}

fn cmp_slices(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

fn canonical_order(f: &NeighborhoodFeatures) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..f.neighbors.len()).collect();
    idx.sort_by(|&a, &b| {
        cmp_slices(f.offsets[a].as_slice(), f.offsets[b].as_slice())
            .then_with(|| cmp_slices(&f.neighbors[a], &f.neighbors[b]))
            .then(a.cmp(&b))
    });
    idx
}

fn non_finite(layer: String) -> Error {
    Error::NonFiniteActivation { layer }
}

fn check(v: &[f64], layer: impl FnOnce() -> String) -> Result<()> {
    if all_finite(v) {
        Ok(())
    } else {
        Err(non_finite(layer()))
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Aggregated feature `f̃` for one center. Pass `keep_cache` to allow
/// [`head_backward`] afterwards.
pub fn head_forward(features: &NeighborhoodFeatures, config: &HeadConfig, weights: &WeightBundle, keep_cache: bool) -> Result<HeadPass> {
    let w = config.width();
    if features.center.len() != w {
        return Err(Error::dims("head center feature", w, features.center.len()));
    }
    if features.offsets.len() != features.neighbors.len() {
        return Err(Error::dims("head neighbor offsets", features.neighbors.len(), features.offsets.len()));
    }
    if let Some(bad) = features.neighbors.iter().find(|n| n.len() != w) {
        return Err(Error::dims("head neighbor feature", w, bad.len()));
    }
    let perm = canonical_order(features);
    let neighbors: Vec<Vec<f64>> = perm.iter().map(|&i| features.neighbors[i].clone()).collect();
    let offsets: Vec<[f64; 3]> = perm.iter().map(|&i| {
        let o = features.offsets[i];
        [o.x, o.y, o.z]
    }).collect();
    let center = features.center.clone();

    let (output, inner) = match config.variant {
        HeadVariant::GeoAttention => {
            let mut x = center.clone();
            let mut caches = Vec::with_capacity(config.layers);
            for l in 0..config.layers {
                let (y, c) = attn_forward(l, &x, &neighbors, &offsets, config, weights)?;
                x = y;
                caches.push(c);
            }
            (x, Inner::Attention(caches))
        }
        HeadVariant::Mlp => {
            let (y, c) = mlp_forward(&center, &neighbors, &offsets, config, weights)?;
            (y, Inner::Mlp(c))
        }
        HeadVariant::EdgeConv => {
            let (y, c) = edge_forward(&center, &neighbors, config, weights)?;
            (y, Inner::Edge(c))
        }
        HeadVariant::PointNet => {
            let (y, c) = pointnet_forward(&center, &neighbors, &offsets, config, weights)?;
            (y, Inner::PointNet(c))
        }
    };
    let cache = keep_cache.then(|| HeadCache { perm, neighbors, offsets, inner });
    Ok(HeadPass { output, cache })
}

/// Accumulates weight gradients into `grads` and returns input gradients.
pub fn head_backward(
    pass: &HeadPass,
    config: &HeadConfig,
    weights: &WeightBundle,
    d_out: &[f64],
    grads: &mut WeightBundle,
) -> Result<InputGrads> {
    let cache = pass.cache.as_ref().ok_or(Error::MissingForwardCache)?;
    if d_out.len() != pass.output.len() {
        return Err(Error::dims("head upstream gradient", pass.output.len(), d_out.len()));
    }
    let k = cache.neighbors.len();
    let w = config.width();
    let mut d_nbrs = vec![vec![0.0; w]; k];
    let mut d_offs = vec![[0.0; 3]; k];
    let d_center = match &cache.inner {
        Inner::Attention(layers) => {
            let mut d = d_out.to_vec();
            for (l, c) in layers.iter().enumerate().rev() {
                d = attn_backward(l, c, &cache.neighbors, &cache.offsets, config, weights, &d, grads, &mut d_nbrs, &mut d_offs);
            }
            d
        }
        Inner::Mlp(c) => mlp_backward(c, config, weights, d_out, grads, &mut d_nbrs, &mut d_offs),
        Inner::Edge(c) => edge_backward(c, config, weights, d_out, grads, &mut d_nbrs),
        Inner::PointNet(c) => pointnet_backward(c, config, weights, d_out, grads, &mut d_nbrs, &mut d_offs),
    };
    let mut neighbors = vec![Vec::new(); k];
    let mut offsets = vec![Vector3::zeros(); k];
    for (canon, &orig) in cache.perm.iter().enumerate() {
        neighbors[orig] = std::mem::take(&mut d_nbrs[canon]);
        offsets[orig] = Vector3::from(d_offs[canon]);
    }
    Ok(InputGrads { center: d_center, neighbors, offsets })
}

// ---- geometry-aware vector attention ----

#[derive(Debug, Clone)]
struct AttnCache {
    x: Vec<f64>,
    q: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos_pre: Vec<Vec<f64>>,
    pos_hidden: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    o: Vec<f64>,
    ln1: LayerNormCache,
    n1: Vec<f64>,
    ffn_pre: Vec<f64>,
    ffn_hidden: Vec<f64>,
    ln2: LayerNormCache,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let mut s = 0.0;
    for v in &e {
        s += v;
    }
    e.iter().map(|v| v / s).collect()
}

/// Logit gradient from weight gradient; sums to zero.
fn softmax_backward(alpha: &[f64], d_alpha: &[f64]) -> Vec<f64> {
    let mut dot = 0.0;
    for (a, d) in alpha.iter().zip(d_alpha) {
        dot += a * d;
    }
    alpha.iter().zip(d_alpha).map(|(a, d)| a * (d - dot)).collect()
}

fn attn_forward(
    l: usize,
    x: &[f64],
    nbrs: &[Vec<f64>],
    offs: &[[f64; 3]],
    cfg: &HeadConfig,
    wb: &WeightBundle,
) -> Result<(Vec<f64>, AttnCache)> {
    let p = format!("attn.{l}");
    let lin = |n: &str| wb.linear(&format!("{p}.{n}"));
    let (wq, bq) = lin("query");
    let (wk, bk) = lin("key");
    let (wv, bv) = lin("value");
    let (p0w, p0b) = lin("pos0");
    let (p1w, p1b) = lin("pos1");
    let n_att = nbrs.len() + 1;
    let attendee = |m: usize| if m == 0 { x } else { nbrs[m - 1].as_slice() };
    let offset = |m: usize| if m == 0 { [0.0; 3] } else { offs[m - 1] };

    let q = affine(wq, bq, x);
    let keys: Vec<Vec<f64>> = (0..n_att).map(|m| affine(wk, bk, attendee(m))).collect();
    let values: Vec<Vec<f64>> = (0..n_att).map(|m| affine(wv, bv, attendee(m))).collect();
    let pos_pre: Vec<Vec<f64>> = (0..n_att).map(|m| affine(p0w, p0b, &offset(m))).collect();
    let pos_hidden: Vec<Vec<f64>> = pos_pre.iter().map(|v| relu(v)).collect();
    let delta: Vec<Vec<f64>> = pos_hidden.iter().map(|h| affine(p1w, p1b, h)).collect();

    let dh = cfg.d_h / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut alpha = Vec::with_capacity(cfg.heads);
    let mut o = vec![0.0; cfg.d_h];
    for h in 0..cfg.heads {
        let r = h * dh..(h + 1) * dh;
        let logits: Vec<f64> = (0..n_att)
            .map(|m| {
                let mut s = 0.0;
                for c in r.clone() {
                    s += (q[c] - keys[m][c] + delta[m][c]) * q[c];
                }
                s * scale
            })
            .collect();
        let a = softmax(&logits);
        for c in r.clone() {
            let mut s = 0.0;
            for m in 0..n_att {
                s += a[m] * (values[m][c] + delta[m][c]);
            }
            o[c] = s;
        }
        alpha.push(a);
    }
    check(&o, || format!("{p}.attention"))?;

    let (wo, bo) = lin("out");
    let y = affine(wo, bo, &o);
    let r1: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
    let (n1, ln1) = layer_norm(&r1, wb.data(&format!("{p}.norm1.gain")), wb.data(&format!("{p}.norm1.bias")));
    let (f0w, f0b) = lin("ffn0");
    let (f1w, f1b) = lin("ffn1");
    let ffn_pre = affine(f0w, f0b, &n1);
    let ffn_hidden = relu(&ffn_pre);
    let z = affine(f1w, f1b, &ffn_hidden);
    let r2: Vec<f64> = n1.iter().zip(&z).map(|(a, b)| a + b).collect();
    let (out, ln2) = layer_norm(&r2, wb.data(&format!("{p}.norm2.gain")), wb.data(&format!("{p}.norm2.bias")));
    check(&out, || p.clone())?;
    let cache = AttnCache {
        x: x.to_vec(),
        q,
        keys,
        values,
        pos_pre,
        pos_hidden,
        delta,
        alpha,
        o,
        ln1,
        n1,
        ffn_pre,
        ffn_hidden,
        ln2,
    };
    Ok((out, cache))
}

#[allow(clippy::too_many_arguments)]
fn attn_backward(
    l: usize,
    c: &AttnCache,
    nbrs: &[Vec<f64>],
    offs: &[[f64; 3]],
    cfg: &HeadConfig,
    wb: &WeightBundle,
    d_out: &[f64],
    grads: &mut WeightBundle,
    d_nbrs: &mut [Vec<f64>],
    d_offs: &mut [[f64; 3]],
) -> Vec<f64> {
    let p = format!("attn.{l}");
    let name = |n: &str| format!("{p}.{n}");
    let w = c.x.len();

    let d_r2 = {
        let (dg, db) = grads.norm_mut(&name("norm2"));
        layer_norm_backward(&c.ln2, wb.data(&name("norm2.gain")), d_out, dg, db)
    };
    let mut d_n1 = d_r2.clone();
    let mut d_hidden = vec![0.0; c.ffn_hidden.len()];
    {
        let (dw, db) = grads.linear_mut(&name("ffn1"));
        affine_backward(wb.linear(&name("ffn1")).0, &c.ffn_hidden, &d_r2, Some(&mut d_hidden), dw, db);
    }
    let d_ffn_pre = relu_backward(&c.ffn_pre, &d_hidden);
    {
        let (dw, db) = grads.linear_mut(&name("ffn0"));
        affine_backward(wb.linear(&name("ffn0")).0, &c.n1, &d_ffn_pre, Some(&mut d_n1), dw, db);
    }
    let d_r1 = {
        let (dg, db) = grads.norm_mut(&name("norm1"));
        layer_norm_backward(&c.ln1, wb.data(&name("norm1.gain")), &d_n1, dg, db)
    };
    let mut dx = d_r1.clone();
    let mut d_o = vec![0.0; cfg.d_h];
    {
        let (dw, db) = grads.linear_mut(&name("out"));
        affine_backward(wb.linear(&name("out")).0, &c.o, &d_r1, Some(&mut d_o), dw, db);
    }

    let n_att = c.keys.len();
    let dh = cfg.d_h / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut d_q = vec![0.0; cfg.d_h];
    let mut d_k = vec![vec![0.0; cfg.d_h]; n_att];
    let mut d_v = vec![vec![0.0; cfg.d_h]; n_att];
    let mut d_delta = vec![vec![0.0; cfg.d_h]; n_att];
    for h in 0..cfg.heads {
        let r = h * dh..(h + 1) * dh;
        let a = &c.alpha[h];
        let d_alpha: Vec<f64> = (0..n_att)
            .map(|m| {
                let mut s = 0.0;
                for ch in r.clone() {
                    s += d_o[ch] * (c.values[m][ch] + c.delta[m][ch]);
                }
                s
            })
            .collect();
        let d_logit = softmax_backward(a, &d_alpha);
        for m in 0..n_att {
            for ch in r.clone() {
                let q = c.q[ch];
                d_v[m][ch] += a[m] * d_o[ch];
                d_delta[m][ch] += a[m] * d_o[ch] + d_logit[m] * q * scale;
                d_k[m][ch] -= d_logit[m] * q * scale;
                d_q[ch] += d_logit[m] * (2.0 * q - c.keys[m][ch] + c.delta[m][ch]) * scale;
            }
        }
    }

    {
        let (dw, db) = grads.linear_mut(&name("query"));
        affine_backward(wb.linear(&name("query")).0, &c.x, &d_q, Some(&mut dx), dw, db);
    }
    let (wk, wv) = (wb.linear(&name("key")).0, wb.linear(&name("value")).0);
    let (p0w, p1w) = (wb.linear(&name("pos0")).0, wb.linear(&name("pos1")).0);
    for m in 0..n_att {
        let (input, d_input): (&[f64], &mut [f64]) =
            if m == 0 { (&c.x, &mut dx) } else { (&nbrs[m - 1], &mut d_nbrs[m - 1]) };
        {
            let (dw, db) = grads.linear_mut(&name("key"));
            affine_backward(wk, input, &d_k[m], Some(&mut *d_input), dw, db);
        }
        {
            let (dw, db) = grads.linear_mut(&name("value"));
            affine_backward(wv, input, &d_v[m], Some(&mut *d_input), dw, db);
        }
        let mut d_ph = vec![0.0; c.pos_hidden[m].len()];
        {
            let (dw, db) = grads.linear_mut(&name("pos1"));
            affine_backward(p1w, &c.pos_hidden[m], &d_delta[m], Some(&mut d_ph), dw, db);
        }
        let d_pp = relu_backward(&c.pos_pre[m], &d_ph);
        let off = if m == 0 { [0.0; 3] } else { offs[m - 1] };
        let mut d_off = [0.0; 3];
        {
            let (dw, db) = grads.linear_mut(&name("pos0"));
            affine_backward(p0w, &off, &d_pp, Some(&mut d_off), dw, db);
        }
        if m > 0 {
            add_into(&mut d_offs[m - 1], &d_off);
        }
    }
    debug_assert_eq!(dx.len(), w);
    dx
}

// ---- mean-aggregated MLP ----

#[derive(Debug, Clone)]
struct MlpCache {
    /// Per layer: its input and its pre-activation.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn mlp_input(center: &[f64], nbrs: &[Vec<f64>], offs: &[[f64; 3]]) -> Vec<f64> {
    let w = center.len();
    let mut u = center.to_vec();
    let mut mean = vec![0.0; 3 + w];
    for (f, o) in nbrs.iter().zip(offs) {
        add_into(&mut mean[..3], o);
        add_into(&mut mean[3..], f);
    }
    if !nbrs.is_empty() {
        let k = nbrs.len() as f64;
        mean.iter_mut().for_each(|v| *v /= k);
    }
    u.extend(mean);
    u
}

fn run_mlp(prefix: &str, count: usize, mut x: Vec<f64>, wb: &WeightBundle, inputs: &mut Vec<Vec<f64>>, pre: &mut Vec<Vec<f64>>) -> Result<Vec<f64>> {
    for i in 0..count {
        let name = format!("{prefix}.{i}");
        let (w, b) = wb.linear(&name);
        let z = affine(w, b, &x);
        check(&z, || name.clone())?;
        let y = relu(&z);
        inputs.push(x);
        pre.push(z);
        x = y;
    }
    Ok(x)
}

/// Backward through `run_mlp`; returns the gradient of its input.
fn run_mlp_backward(prefix: &str, inputs: &[Vec<f64>], pre: &[Vec<f64>], wb: &WeightBundle, d_out: &[f64], grads: &mut WeightBundle) -> Vec<f64> {
    let mut d = d_out.to_vec();
    for i in (0..inputs.len()).rev() {
        let name = format!("{prefix}.{i}");
        let dz = relu_backward(&pre[i], &d);
        let mut dx = vec![0.0; inputs[i].len()];
        let (dw, db) = grads.linear_mut(&name);
        affine_backward(wb.linear(&name).0, &inputs[i], &dz, Some(&mut dx), dw, db);
        d = dx;
    }
    d
}

fn mlp_forward(center: &[f64], nbrs: &[Vec<f64>], offs: &[[f64; 3]], cfg: &HeadConfig, wb: &WeightBundle) -> Result<(Vec<f64>, MlpCache)> {
    let (mut inputs, mut pre) = (Vec::new(), Vec::new());
    let y = run_mlp("mlp", cfg.mlp_widths.len(), mlp_input(center, nbrs, offs), wb, &mut inputs, &mut pre)?;
    Ok((y, MlpCache { inputs, pre }))
}

fn mlp_backward(
    c: &MlpCache,
    cfg: &HeadConfig,
    wb: &WeightBundle,
    d_out: &[f64],
    grads: &mut WeightBundle,
    d_nbrs: &mut [Vec<f64>],
    d_offs: &mut [[f64; 3]],
) -> Vec<f64> {
    let w = cfg.width();
    let du = run_mlp_backward("mlp", &c.inputs, &c.pre, wb, d_out, grads);
    if !d_nbrs.is_empty() {
        let k = d_nbrs.len() as f64;
        for (dn, dof) in d_nbrs.iter_mut().zip(d_offs.iter_mut()) {
            for i in 0..3 {
                dof[i] += du[w + i] / k;
            }
            for (a, g) in dn.iter_mut().zip(&du[w + 3..]) {
                *a += g / k;
            }
        }
    }
    du[..w].to_vec()
}

// ---- EdgeConv over the star graph with self-loops ----

#[derive(Debug, Clone)]
struct EdgeCache {
    center: Vec<f64>,
    nbrs: Vec<Vec<f64>>,
    /// Per channel: winning edge of the center (0 = self loop, m = neighbor m)
    /// and its pre-activation.
    center_arg: Vec<usize>,
    center_max: Vec<f64>,
    /// Per neighbor and channel: winning edge (0 = self loop, 1 = to center).
    nbr_arg: Vec<Vec<usize>>,
    nbr_max: Vec<Vec<f64>>,
}

fn edge_input(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = a.to_vec();
    v.extend(b.iter().zip(a).map(|(x, y)| x - y));
    v
}

/// Channel-wise max over candidate pre-activations; first index wins ties.
fn argmax_channels(cands: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    let n = cands[0].len();
    let mut arg = vec![0; n];
    let mut best = cands[0].clone();
    for (e, c) in cands.iter().enumerate().skip(1) {
        for ch in 0..n {
            if c[ch] > best[ch] {
                best[ch] = c[ch];
                arg[ch] = e;
            }
        }
    }
    (arg, best)
}

fn edge_forward(center: &[f64], nbrs: &[Vec<f64>], cfg: &HeadConfig, wb: &WeightBundle) -> Result<(Vec<f64>, Vec<EdgeCache>)> {
    let layers = cfg.edgeconv_channels.len();
    let mut x_c = center.to_vec();
    let mut x_n: Vec<Vec<f64>> = nbrs.to_vec();
    let mut output = Vec::with_capacity(cfg.agg_dim());
    let mut caches = Vec::with_capacity(layers);
    for l in 0..layers {
        let name = format!("edge.{l}");
        let (w, b) = wb.linear(&name);
        let mut cands = vec![affine(w, b, &edge_input(&x_c, &x_c))];
        for xm in &x_n {
            cands.push(affine(w, b, &edge_input(&x_c, xm)));
        }
        let (center_arg, center_max) = argmax_channels(&cands);
        check(&center_max, || name.clone())?;
        let mut nbr_arg = Vec::new();
        let mut nbr_max = Vec::new();
        // The last layer's neighbor updates never reach the output.
        if l + 1 < layers {
            for xm in &x_n {
                let (a, m) = argmax_channels(&[affine(w, b, &edge_input(xm, xm)), affine(w, b, &edge_input(xm, &x_c))]);
                check(&m, || name.clone())?;
                nbr_arg.push(a);
                nbr_max.push(m);
            }
        }
        let new_c = relu(&center_max);
        let new_n: Vec<Vec<f64>> = nbr_max.iter().map(|m| relu(m)).collect();
        output.extend_from_slice(&new_c);
        caches.push(EdgeCache { center: x_c, nbrs: x_n, center_arg, center_max, nbr_arg, nbr_max });
        x_c = new_c;
        x_n = new_n;
    }
    Ok((output, caches))
}

fn edge_backward(
    caches: &[EdgeCache],
    cfg: &HeadConfig,
    wb: &WeightBundle,
    d_out: &[f64],
    grads: &mut WeightBundle,
    d_nbrs_out: &mut [Vec<f64>],
) -> Vec<f64> {
    let chans = &cfg.edgeconv_channels;
    let mut offsets = vec![0; chans.len()];
    for l in 1..chans.len() {
        offsets[l] = offsets[l - 1] + chans[l - 1];
    }
    let k = d_nbrs_out.len();
    // Gradients flowing into the outputs of layer l from layer l + 1.
    let mut d_c_next: Vec<f64> = vec![0.0; *chans.last().unwrap()];
    let mut d_n_next: Vec<Vec<f64>> = vec![Vec::new(); k];
    for l in (0..chans.len()).rev() {
        let c = &caches[l];
        let name = format!("edge.{l}");
        let w = wb.linear(&name).0;
        let c_in = c.center.len();
        let mut d_c = d_c_next.clone();
        add_into(&mut d_c, &d_out[offsets[l]..offsets[l] + chans[l]]);

        let mut d_center_in = vec![0.0; c_in];
        let mut d_nbr_in = vec![vec![0.0; c_in]; k];
        let edge_back = |a: Option<usize>, b: Option<usize>, d_pre: &[f64], grads: &mut WeightBundle, dci: &mut Vec<f64>, dni: &mut Vec<Vec<f64>>| {
            if d_pre.iter().all(|v| *v == 0.0) {
                return;
            }
            let xa = a.map_or(&c.center, |m| &c.nbrs[m]);
            let xb = b.map_or(&c.center, |m| &c.nbrs[m]);
            let input = edge_input(xa, xb);
            let mut d_in = vec![0.0; 2 * c_in];
            let (dw, db) = grads.linear_mut(&name);
            affine_backward(w, &input, d_pre, Some(&mut d_in), dw, db);
            let (first, diff) = d_in.split_at(c_in);
            let da = match a {
                None => &mut *dci,
                Some(m) => &mut dni[m],
            };
            for i in 0..c_in {
                da[i] += first[i] - diff[i];
            }
            let db_ = match b {
                None => &mut *dci,
                Some(m) => &mut dni[m],
            };
            add_into(db_, diff);
        };

        // Center: candidate 0 is the self loop, candidate m the edge to neighbor m - 1.
        let mut d_pre = vec![vec![0.0; chans[l]]; k + 1];
        for ch in 0..chans[l] {
            if c.center_max[ch] > 0.0 {
                d_pre[c.center_arg[ch]][ch] += d_c[ch];
            }
        }
        for (e, dp) in d_pre.iter().enumerate() {
            let b = if e == 0 { None } else { Some(e - 1) };
            edge_back(None, b, dp, grads, &mut d_center_in, &mut d_nbr_in);
        }
        if !c.nbr_arg.is_empty() {
            for m in 0..k {
                let mut d_pre = [vec![0.0; chans[l]], vec![0.0; chans[l]]];
                for ch in 0..chans[l] {
                    if c.nbr_max[m][ch] > 0.0 {
                        d_pre[c.nbr_arg[m][ch]][ch] += d_n_next[m][ch];
                    }
                }
                edge_back(Some(m), Some(m), &d_pre[0], grads, &mut d_center_in, &mut d_nbr_in);
                edge_back(Some(m), None, &d_pre[1], grads, &mut d_center_in, &mut d_nbr_in);
            }
        }
        d_c_next = d_center_in;
        d_n_next = d_nbr_in;
    }
    for (acc, d) in d_nbrs_out.iter_mut().zip(&d_n_next) {
        add_into(acc, d);
    }
    d_c_next
}

// ---- PointNet ----

#[derive(Debug, Clone)]
struct PointNetCache {
    point_inputs: Vec<Vec<Vec<f64>>>,
    point_pre: Vec<Vec<Vec<f64>>>,
    pool_arg: Vec<usize>,
    head_inputs: Vec<Vec<f64>>,
    head_pre: Vec<Vec<f64>>,
}

fn pointnet_forward(center: &[f64], nbrs: &[Vec<f64>], offs: &[[f64; 3]], cfg: &HeadConfig, wb: &WeightBundle) -> Result<(Vec<f64>, PointNetCache)> {
    let n_shared = cfg.pointnet_shared.len();
    let mut point_inputs = Vec::with_capacity(nbrs.len() + 1);
    let mut point_pre = Vec::with_capacity(nbrs.len() + 1);
    let mut feats = Vec::with_capacity(nbrs.len() + 1);
    for m in 0..=nbrs.len() {
        let mut p = if m == 0 { center.to_vec() } else { nbrs[m - 1].clone() };
        p.extend(if m == 0 { [0.0; 3] } else { offs[m - 1] });
        let (mut ins, mut pre) = (Vec::new(), Vec::new());
        feats.push(run_mlp("pointnet.shared", n_shared, p, wb, &mut ins, &mut pre)?);
        point_inputs.push(ins);
        point_pre.push(pre);
    }
    let width = feats[0].len();
    let mut pool_arg = vec![0; width];
    let mut pooled = feats[0].clone();
    for (m, f) in feats.iter().enumerate().skip(1) {
        for ch in 0..width {
            if f[ch] > pooled[ch] {
                pooled[ch] = f[ch];
                pool_arg[ch] = m;
            }
        }
    }
    let (mut head_inputs, mut head_pre) = (Vec::new(), Vec::new());
    let out = run_mlp("pointnet.head", cfg.pointnet_head.len(), pooled, wb, &mut head_inputs, &mut head_pre)?;
    Ok((out, PointNetCache { point_inputs, point_pre, pool_arg, head_inputs, head_pre }))
}

fn pointnet_backward(
    c: &PointNetCache,
    cfg: &HeadConfig,
    wb: &WeightBundle,
    d_out: &[f64],
    grads: &mut WeightBundle,
    d_nbrs: &mut [Vec<f64>],
    d_offs: &mut [[f64; 3]],
) -> Vec<f64> {
    let w = cfg.width();
    let d_pooled = run_mlp_backward("pointnet.head", &c.head_inputs, &c.head_pre, wb, d_out, grads);
    let n_points = c.point_inputs.len();
    let mut d_feat = vec![vec![0.0; d_pooled.len()]; n_points];
    for (ch, &m) in c.pool_arg.iter().enumerate() {
        d_feat[m][ch] += d_pooled[ch];
    }
    let mut d_center = vec![0.0; w];
    for m in 0..n_points {
        if d_feat[m].iter().all(|v| *v == 0.0) {
            continue;
        }
        let dp = run_mlp_backward("pointnet.shared", &c.point_inputs[m], &c.point_pre[m], wb, &d_feat[m], grads);
        if m == 0 {
            add_into(&mut d_center, &dp[..w]);
        } else {
            add_into(&mut d_nbrs[m - 1], &dp[..w]);
            add_into(&mut d_offs[m - 1], &dp[w..]);
        }
    }
    d_center
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::init_weights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, w: usize, k: usize) -> NeighborhoodFeatures {
        let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let center = v(w);
        let neighbors = (0..k).map(|_| v(w)).collect();
        let offsets = (0..k).map(|_| Vector3::from_vec(v(3))).collect();
        NeighborhoodFeatures { center, neighbors, offsets }
    }

    #[test]
    fn softmax_logit_gradient_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let d: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let g = softmax_backward(&softmax(&logits), &d);
            assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn single_attendee_gets_full_weight() {
        let cfg = HeadConfig::compact(HeadVariant::GeoAttention, 27);
        let wb = init_weights(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_features(&mut rng, cfg.width(), 0);
        let pass = head_forward(&f, &cfg, &wb, true).unwrap();
        for layer in pass.cache.unwrap().attention_weights().unwrap() {
            for head in layer {
                assert_eq!(head, &vec![1.0]);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in HeadVariant::ALL {
            let cfg = HeadConfig::compact(v, 27);
            let wb = init_weights(&cfg, 5).unwrap();
            let f = random_features(&mut rng, cfg.width(), 4);
            let pass = head_forward(&f, &cfg, &wb, true).unwrap();
            let mut g = wb.zeros_like();
            let ig = head_backward(&pass, &cfg, &wb, &vec![0.0; pass.output.len()], &mut g).unwrap();
            assert!(g.iter().all(|(_, t)| t.data.iter().all(|x| *x == 0.0)), "{v}");
            assert!(ig.center.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn backward_requires_cache() {
        let cfg = HeadConfig::compact(HeadVariant::Mlp, 27);
        let wb = init_weights(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_features(&mut rng, cfg.width(), 2);
        let pass = head_forward(&f, &cfg, &wb, false).unwrap();
        let mut g = wb.zeros_like();
        assert!(matches!(
            head_backward(&pass, &cfg, &wb, &vec![1.0; pass.output.len()], &mut g),
            Err(Error::MissingForwardCache)
        ));
    }
}
