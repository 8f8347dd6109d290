//! Seed derivation and counter-based randomness.
//!
//! Every stochastic call in the crate is keyed by an explicit `u64` seed. Where
//! results must not depend on iteration or thread order (per-pixel noise,
//! per-triplet Bernoulli draws, per-image seeds) the value is a pure function
//! of `(seed, counter...)` computed by [`mix`]. Sequential sampling uses
//! [`rng`], a ChaCha8 stream seeded from a derived seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a seed and a list of counters into one 64-bit value.
#[inline]
pub fn mix(seed: u64, counters: &[u64]) -> u64 {
    let mut h = finalize(seed.wrapping_add(GOLDEN));
    for &c in counters {
        h = finalize(h ^ c.wrapping_add(GOLDEN).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    h
}

/// Uniform integer in `0..n` from a 64-bit hash (multiply-shift reduction).
#[inline]
pub fn below(hash: u64, n: u64) -> u64 {
    ((hash as u128 * n as u128) >> 64) as u64
}

/// Uniform float in `[0, 1)` from a 64-bit hash.
#[inline]
pub fn unit(hash: u64) -> f64 {
    (hash >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Derives a child seed from a parent seed and string labels.
///
/// Stable across platforms and releases: it hashes the labels with SHA-256,
/// so reordering a corpus never changes the seed attached to an identity.
pub fn derive(seed: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}

/// Seed for repeat `index` of an experiment run under `seed`.
pub fn repeat_seed(seed: u64, index: usize) -> u64 {
    derive(seed, &["repeat", &index.to_string()])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
