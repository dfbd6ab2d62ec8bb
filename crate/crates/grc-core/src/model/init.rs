//! Named counter-based weight initialization.
//!
//! Each parameter tensor draws from its own stream keyed by
//! `seed ^ fnv1a64(name)`, advanced by splitmix64, with standard normals
//! from the Box-Muller transform scaled by 0.02. The construction uses
//! only integer arithmetic plus `ln`/`cos`/`sqrt`, so any language can
//! reproduce the bytes.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub struct GaussianStream {
    state: u64,
}

impl GaussianStream {
    fn uniform(&mut self) -> f64 {
        // 53 mantissa bits, shifted into (0, 1] so ln never sees zero.
        ((splitmix64(&mut self.state) >> 11) as f64 + 1.0) / (1u64 << 53) as f64
    }

    /// Standard normal via Box-Muller (cosine branch only).
    pub fn next_standard(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal(0, 0.02), the weight init scale.
    pub fn next_scaled(&mut self) -> f64 {
        0.02 * self.next_standard()
    }
}

/// Stream of init values for the parameter tensor `name`.
pub fn gaussian_stream(seed: u64, name: &str) -> GaussianStream {
    GaussianStream {
        state: seed ^ fnv1a64(name.as_bytes()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_named() {
        let a: Vec<f64> = {
            let mut s = gaussian_stream(42, "embedding");
            (0..8).map(|_| s.next_scaled()).collect()
        };
        let b: Vec<f64> = {
            let mut s = gaussian_stream(42, "embedding");
            (0..8).map(|_| s.next_scaled()).collect()
        };
        let c: Vec<f64> = {
            let mut s = gaussian_stream(42, "lm_head");
            (0..8).map(|_| s.next_scaled()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn scale_is_roughly_002() {
        let mut s = gaussian_stream(7, "scale_probe");
        let n = 20_000;
        let values: Vec<f64> = (0..n).map(|_| s.next_scaled()).collect();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-3, "mean {mean}");
        assert!((var.sqrt() - 0.02).abs() < 1e-3, "std {}", var.sqrt());
    }

    #[test]
    fn fnv_reference_value() {
        // Well-known FNV-1a test vector.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
