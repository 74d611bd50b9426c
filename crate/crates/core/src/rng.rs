//! Seeded, counter-based random streams.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream used for initial noise and for the forward corruption in transfer.
pub const INITIAL_STREAM: u64 = 0;

/// Independent generator for `(seed, sample, step)`.
///
/// The seed and sample index form the ChaCha key and `step` selects the
/// stream, so each reverse step of each sample draws from its own sequence
/// regardless of how work is scheduled.
pub fn stream(seed: u64, sample: u64, step: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&sample.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(step);
    rng
}

/// Seed for a sub-task `(a, b)` of a run seeded with `seed`.
pub fn mix(seed: u64, a: u64, b: u64) -> u64 {
    stream(seed, a, b).next_u64()
}

/// Plain seeded generator for training and estimators.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
