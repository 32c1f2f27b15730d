//! Gaussian primitives and degree-1 spherical harmonics.

use nalgebra::Vector3;

/// Degree-0 SH basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// Degree-1 SH basis constant.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
/// SH coefficients per color channel at degree 1.
pub const SH_COEFFS: usize = 4;

/// A renderable 3D Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub position: Vector3<f64>,
    /// In (0, 1).
    pub opacity: f64,
    /// Per-axis standard deviations, scene units.
    pub scale: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    /// `sh[k][channel]`, `k` over the basis `[c0, -c1·y, c1·z, -c1·x]`.
    pub sh: [[f64; 3]; SH_COEFFS],
}

impl GaussianPrimitive {
    /// Isotropic, view-independent primitive of the given color.
    pub fn isotropic(position: Vector3<f64>, radius: f64, opacity: f64, color: [f64; 3]) -> Self {
        let mut sh = [[0.0; 3]; SH_COEFFS];
        for c in 0..3 {
            sh[0][c] = color[c] / SH_C0;
        }
        GaussianPrimitive {
            position,
            opacity,
            scale: Vector3::new(radius, radius, radius),
            rotation: [1.0, 0.0, 0.0, 0.0],
            sh,
        }
    }
}

/// Loss gradient with respect to every attribute of one primitive.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GaussianGrad {
    pub position: Vector3<f64>,
    pub opacity: f64,
    pub scale: Vector3<f64>,
    pub rotation: [f64; 4],
    pub sh: [[f64; 3]; SH_COEFFS],
}

impl GaussianGrad {
    pub fn is_zero(&self) -> bool {
        *self == GaussianGrad::default()
    }

    /// Flattened as position, opacity, scale, rotation, sh.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.position.x, self.position.y, self.position.z, self.opacity];
        v.extend(self.scale.iter());
        v.extend(self.rotation);
        v.extend(self.sh.iter().flatten());
        v
    }

    pub fn add_assign(&mut self, o: &GaussianGrad) {
        self.position += o.position;
        self.opacity += o.opacity;
        self.scale += o.scale;
        for i in 0..4 {
            self.rotation[i] += o.rotation[i];
        }
        for k in 0..SH_COEFFS {
            for c in 0..3 {
                self.sh[k][c] += o.sh[k][c];
            }
        }
    }
}

/// SH basis values along unit direction `d`.
#[inline]
pub fn sh_basis(d: &Vector3<f64>) -> [f64; SH_COEFFS] {
    [SH_C0, -SH_C1 * d.y, SH_C1 * d.z, -SH_C1 * d.x]
}

/// Unclamped color along unit direction `d`.
pub fn eval_sh(sh: &[[f64; 3]; SH_COEFFS], d: &Vector3<f64>) -> [f64; 3] {
    let b = sh_basis(d);
    let mut out = [0.0; 3];
    for c in 0..3 {
        for k in 0..SH_COEFFS {
            out[c] += b[k] * sh[k][c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc_only_is_view_independent() {
        let mut sh = [[0.0; 3]; 4];
        sh[0] = [1.0, 2.0, 0.5];
        for d in [Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.6, 0.0, 0.8)] {
            let c = eval_sh(&sh, &d);
            assert_eq!(c, [SH_C0, 2.0 * SH_C0, 0.5 * SH_C0]);
        }
        assert!((SH_C0 - 0.28209479).abs() < 1e-8);
    }
}
