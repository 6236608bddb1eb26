//! Seed derivation and Gaussian sampling helpers.
//!
//! Every stochastic stage derives its own ChaCha stream from a root seed and
//! a couple of structural indices, so regenerating any one artifact never
//! depends on how many draws some other stage consumed.

use rand::{Rng, RngExt};
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// splitmix64 finalizer; decorrelates consecutive seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for a (stage, index) pair under a root seed.
pub fn subseed(root: u64, stage: u64, index: u64) -> u64 {
    mix64(mix64(root ^ mix64(stage)) ^ index)
}

/// ChaCha stream for a (stage, index) pair under a root seed.
pub fn stream(root: u64, stage: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(root, stage, index))
}

/// Standard normal draw via Box-Muller.
pub fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.random();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.random();
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}
