//! Seeded randomness with attributable draws.
//!
//! Every stochastic component takes its randomness from a [`NoiseSource`]
//! created for that one call, so a run is reproducible from (seed, draw
//! index) alone. Seeds for sub-tasks (per-batch, per-step) are derived with
//! [`derive_seed`], a splitmix64 chain that is trivial to re-implement
//! independently.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// splitmix64 output function (Steele, Lea, Flood 2014). Public domain
/// constants; used for seed derivation because it is stateless and easy to
/// reproduce in any language.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a stream index.
///
/// Distinct (base, stream) pairs map to well-separated seeds, so adjacent
/// streams do not overlap the way `base + i` would.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

/// A source of latent-shaped noise draws.
///
/// One source per call; sources are never shared across concurrent work.
pub trait NoiseSource: Send {
    /// Standard-normal draw of the given (N, C, H, W) shape.
    fn standard_normal(&mut self, shape: (usize, usize, usize, usize)) -> Array4<f64>;

    /// Number of scalar draws consumed so far.
    fn draws(&self) -> u64;
}

/// ChaCha12-backed noise source. Deterministic across platforms for a
/// fixed seed; the draw counter makes every value attributable.
pub struct SeededNoise {
    rng: ChaCha12Rng,
    seed: u64,
    draws: u64,
}

impl SeededNoise {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha12Rng::seed_from_u64(seed),
            seed,
            draws: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Scalar standard-normal draw.
    pub fn normal(&mut self) -> f64 {
        self.draws += 1;
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.draws += 1;
        self.rng.gen_range(lo..hi)
    }
}

impl NoiseSource for SeededNoise {
    fn standard_normal(&mut self, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.normal());
        }
        Array4::from_shape_vec(shape, data).expect("shape/len consistent by construction")
    }

    fn draws(&self) -> u64 {
        self.draws
    }
}

/// Noise source that always returns zeros. Turns stochastic samplers into
/// their deterministic mean path; used by tests that plug exact values into
/// the diffusion recursion.
pub struct ZeroNoise {
    draws: u64,
}

impl ZeroNoise {
    pub fn new() -> Self {
        Self { draws: 0 }
    }
}

impl Default for ZeroNoise {
    fn default() -> Self {
        Self::new()
    }
}

impl NoiseSource for ZeroNoise {
    fn standard_normal(&mut self, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        self.draws += shape.0 as u64 * shape.1 as u64 * shape.2 as u64 * shape.3 as u64;
        Array4::zeros(shape)
    }

    fn draws(&self) -> u64 {
        self.draws
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix64_reference_values() {
        // First three outputs for seed 0 of the published splitmix64.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        let s1 = 0x9E37_79B9_7F4A_7C15u64;
        assert_eq!(splitmix64(s1), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn derived_seeds_distinct_for_adjacent_streams() {
        let a = derive_seed(42, 0);
        let b = derive_seed(42, 1);
        let c = derive_seed(43, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(b, c);
    }

    #[test]
    fn seeded_noise_reproducible_and_counted() {
        let mut a = SeededNoise::new(7);
        let mut b = SeededNoise::new(7);
        let x = a.standard_normal((2, 1, 3, 3));
        let y = b.standard_normal((2, 1, 3, 3));
        assert_eq!(x, y);
        assert_eq!(a.draws(), 18);
    }

    #[test]
    fn zero_noise_is_zero() {
        let mut z = ZeroNoise::new();
        let x = z.standard_normal((1, 1, 2, 2));
        assert!(x.iter().all(|&v| v == 0.0));
        assert_eq!(z.draws(), 4);
    }
}
