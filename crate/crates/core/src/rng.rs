//! SplitMix64, the only source of randomness in the crate.
//!
//! Every seeded quantity (toy embeddings, sampling draws, attack decisions)
//! comes from this generator so runs replay bit-for-bit in any language that
//! implements the same three operations:
//!
//! * `next_u64`: add `0x9E3779B97F4A7C15` to the state, then apply [`mix64`].
//! * `next_f64`: the top 53 bits of `next_u64` divided by 2^53, in `[0, 1)`.
//! * `next_normal`: Marsaglia's polar method. Draws `u = 2·next_f64() − 1`
//!   then `v = 2·next_f64() − 1` until `0 < s = u² + v² < 1`, and returns
//!   `u·sqrt(−2 ln s / s)`. The second variate is discarded.

/// Additive constant of SplitMix64 (also the multiplier of the partition PRF).
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// The SplitMix64 output finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    pub fn next_normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Uniform index in `0..n` by scaling a uniform real.
    #[inline]
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }
}

/// Folds a sequence of words into one 64-bit fingerprint.
pub fn fingerprint<I: IntoIterator<Item = u64>>(words: I) -> u64 {
    words.into_iter().fold(GOLDEN_GAMMA, |acc, w| mix64(acc.wrapping_add(GOLDEN_GAMMA) ^ w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_stream_seed_zero() {
        // Published first outputs of SplitMix64 seeded with 0.
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(rng.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn uniforms_in_unit_interval() {
        let mut rng = SplitMix64::new(42);
        for _ in 0..10_000 {
            let u = rng.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normals_have_unit_moments() {
        let mut rng = SplitMix64::new(7);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn index_stays_in_range() {
        let mut rng = SplitMix64::new(1);
        for n in 1..50 {
            for _ in 0..100 {
                assert!(rng.next_index(n) < n);
            }
        }
    }
}
