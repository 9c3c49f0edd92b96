//! Seed derivation and deterministic sampling primitives.
//!
//! One global seed fans out into per-stage (and per-item) seeds by hashing
//! the stage label, so adding a pipeline stage never perturbs the randomness
//! of earlier stages, and per-item streams are independent of worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from a base seed and a stage label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Derives a child seed for the `index`-th item of a labeled stage.
pub fn derive_seed_indexed(base: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws `k` of `n` indices without replacement via partial Fisher-Yates.
/// The returned order is the draw order; clamps `k` to `n`.
pub fn sample_without_replacement(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for j in 0..k {
        let pick = rng.gen_range(j..n);
        idx.swap(j, pick);
    }
    idx.truncate(k);
    idx
}

/// A full random permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    sample_without_replacement(n, n, rng)
}
