//! Seed derivation and deterministic random sampling helpers.
//!
//! Every random draw in the crate flows through a [`ChaCha8Rng`] whose seed is
//! derived from a base seed plus one or more stream identifiers. Derivation is
//! a couple of splitmix64 rounds, so distinct streams never alias and the same
//! inputs always produce the same stream on any platform.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One splitmix64 step. Used as a seed mixer, not as an RNG.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a base seed and a stream id.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(base) ^ splitmix64(stream.wrapping_add(0x51_7cc1b727220a95)))
}

/// A seeded RNG for the given (base, stream) pair.
pub fn stream_rng(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// One N(0, sigma^2) sample via Box-Muller. `sigma = 0` short-circuits to 0.
pub fn sample_normal<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    // u1 in (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
