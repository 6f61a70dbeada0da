//! Seeded randomness.
//!
//! All randomness in the crate comes from xoshiro256** seeded through
//! SplitMix64 (`Xoshiro256StarStar::seed_from_u64`). Normal deviates use the
//! Box–Muller transform on two uniforms; both outputs of each pair are used.

use rand::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

pub type Rng = Xoshiro256StarStar;

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256StarStar::seed_from_u64(seed)
}

/// Derives an independent stream for `(seed, a, b)` without sharing state.
pub fn derived(seed: u64, a: u64, b: u64) -> Rng {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [a, b] {
        h = splitmix(h ^ v);
    }
    seeded(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in `[lo, hi)`.
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Fills `out` with standard normal deviates.
pub fn fill_normal(rng: &mut Rng, out: &mut [f64]) {
    let mut chunks = out.chunks_mut(2);
    for pair in &mut chunks {
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - rng.random::<f64>();
        let u2 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        pair[0] = r * theta.cos();
        if pair.len() > 1 {
            pair[1] = r * theta.sin();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_moments() {
        let mut rng = seeded(3);
        let mut v = vec![0.0; 200_000];
        fill_normal(&mut rng, &mut v);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn derived_streams_differ() {
        let a: u64 = derived(1, 0, 0).random();
        let b: u64 = derived(1, 0, 1).random();
        let c: u64 = derived(1, 0, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
