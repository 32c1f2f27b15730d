//! Stateless counter-based randomness.
//!
//! Every draw is a pure function of its key, so per-pixel draws do not depend
//! on traversal order and can be evaluated in any order or in parallel.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer: a bijective avalanche mix of one word.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Top 53 bits mapped to [0, 1).
#[inline]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in [0, 1) keyed on `(seed, view, u, v)`.
#[inline]
pub fn pixel_uniform(seed: u64, view: u32, u: u32, v: u32) -> f64 {
    let coord = ((u as u64) << 32) | v as u64;
    let k = mix64(seed ^ mix64((view as u64).wrapping_mul(GOLDEN) ^ mix64(coord)));
    unit_f64(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_moments() {
        let n = 200_000u32;
        let (mut s, mut s2) = (0.0, 0.0);
        for i in 0..n {
            let x = pixel_uniform(7, 0, i % 512, i / 512);
            assert!((0.0..1.0).contains(&x));
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
        assert!((var - 1.0 / 12.0).abs() < 0.002, "var {var}");
    }

    #[test]
    fn keys_are_distinct() {
        assert_ne!(pixel_uniform(1, 0, 3, 4), pixel_uniform(1, 0, 4, 3));
        assert_ne!(pixel_uniform(1, 0, 3, 4), pixel_uniform(1, 1, 3, 4));
        assert_ne!(pixel_uniform(1, 0, 3, 4), pixel_uniform(2, 0, 3, 4));
        assert_eq!(pixel_uniform(1, 0, 3, 4), pixel_uniform(1, 0, 3, 4));
    }
}
