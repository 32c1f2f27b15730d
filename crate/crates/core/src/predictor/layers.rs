//! Dense building blocks with hand-written backward passes. All reductions
//! run left to right in index order.

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// `W x + b` with `W` row-major `[out, in]`.
pub(crate) fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    debug_assert_eq!(w.len(), b.len() * n_in);
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut s = 0.0;
            for (wi, xi) in row.iter().zip(x) {
                s += wi * xi;
            }
            s + bias
        })
        .collect()
}

/// Accumulates gradients of `y = W x + b` into `dx`, `dw`, `db`.
pub(crate) fn affine_backward(w: &[f64], x: &[f64], dy: &[f64], dx: Option<&mut [f64]>, dw: &mut [f64], db: &mut [f64]) {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        db[o] += g;
        let row = &mut dw[o * n_in..(o + 1) * n_in];
        for (r, xi) in row.iter_mut().zip(x) {
            *r += g * xi;
        }
    }
    if let Some(dx) = dx {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * n_in..(o + 1) * n_in];
            for (d, wi) in dx.iter_mut().zip(row) {
                *d += g * wi;
            }
        }
    }
}

pub(crate) fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Gradient through a rectifier given its pre-activation.
pub(crate) fn relu_backward(pre: &[f64], dy: &[f64]) -> Vec<f64> {
    pre.iter().zip(dy).map(|(&p, &g)| if p > 0.0 { g } else { 0.0 }).collect()
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: f64,
}

pub(crate) fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for v in x {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat.iter().zip(gain).zip(bias).map(|((h, g), b)| h * g + b).collect();
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `dx`; accumulates into `dgain`, `dbias`.
pub(crate) fn layer_norm_backward(cache: &LayerNormCache, gain: &[f64], dy: &[f64], dgain: &mut [f64], dbias: &mut [f64]) -> Vec<f64> {
    let n = dy.len() as f64;
    let mut dxhat = Vec::with_capacity(dy.len());
    let (mut sum, mut sum_xh) = (0.0, 0.0);
    for i in 0..dy.len() {
        dgain[i] += dy[i] * cache.xhat[i];
        dbias[i] += dy[i];
        let d = dy[i] * gain[i];
        sum += d;
        sum_xh += d * cache.xhat[i];
        dxhat.push(d);
    }
    dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(d, xh)| cache.inv_std * (d - sum / n - xh * sum_xh / n))
        .collect()
}

pub(crate) fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn layer_norm_gradient() {
        let x = [0.3, -1.2, 2.0, 0.7, -0.1];
        let g = [1.1, 0.9, 1.3, 0.5, 1.0];
        let b = [0.1, 0.0, -0.2, 0.3, 0.0];
        let up = [0.5, -1.0, 0.25, 2.0, -0.7];
        let loss = |x: &[f64]| layer_norm(x, &g, &b).0.iter().zip(&up).map(|(y, u)| y * u).sum::<f64>();
        let (_, cache) = layer_norm(&x, &g, &b);
        let mut dg = [0.0; 5];
        let mut db = [0.0; 5];
        let dx = layer_norm_backward(&cache, &g, &up, &mut dg, &mut db);
        for (a, n) in dx.iter().zip(fd(loss, &x)) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
    }

    #[test]
    fn affine_gradient() {
        let w = [0.5, -1.0, 2.0, 0.1, 0.3, -0.4];
        let b = [0.2, -0.3];
        let x = [1.0, 2.0, -0.5];
        let up = [0.7, -1.3];
        let mut dx = [0.0; 3];
        let mut dw = [0.0; 6];
        let mut db = [0.0; 2];
        affine_backward(&w, &x, &up, Some(&mut dx), &mut dw, &mut db);
        let loss = |x: &[f64]| affine(&w, &b, x).iter().zip(&up).map(|(y, u)| y * u).sum::<f64>();
        for (a, n) in dx.iter().zip(fd(loss, &x)) {
            assert!((a - n).abs() < 1e-8);
        }
        assert_eq!(db, up);
        assert_eq!(dw[1], up[0] * x[1]);
    }
}
