//! Seed derivation and categorical sampling helpers.
//!
//! A single master seed drives every run. Per-stage, per-client generators
//! are derived by hashing `(master, stage, index)` with FNV-1a, so stages
//! never share RNG state and reruns of a single stage reproduce the full
//! pipeline's randomness exactly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Stable 64-bit FNV-1a over a byte slice.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h = (h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
    }
    h
}

/// Derives a stream seed from `(master, stage, index)`.
pub fn derive_seed(master: u64, stage: &str, index: u64) -> u64 {
    let mut bytes = Vec::with_capacity(16 + stage.len());
    bytes.extend_from_slice(&master.to_le_bytes());
    bytes.extend_from_slice(stage.as_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    fnv1a(&bytes)
}

/// A deterministic generator for the given `(master, stage, index)` stream.
pub fn stream_rng(master: u64, stage: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stage, index))
}

/// Draws an index with probability proportional to `weights[i]`.
///
/// Zero-weight entries are never selected while total mass is positive.
/// The caller must guarantee at least one positive weight.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "sample_categorical requires positive mass");
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = Some(i);
            if acc > target {
                return i;
            }
        }
    }
    // Rounding can leave `acc` marginally below `target`; fall back to the
    // final positive-weight entry.
    last_positive.expect("no positive weight")
}
