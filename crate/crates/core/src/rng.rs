//! Deterministic per-sample random streams.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent stream `index` of the generator seeded by `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `n` seeds drawn from stream `index` of `seed`.
pub fn derive_seeds(seed: u64, index: u64, n: usize) -> Vec<u64> {
    let mut rng = stream(seed, index);
    (0..n).map(|_| rng.random::<u64>()).collect()
}

/// FNV-1a hash of a name; stable across platforms and releases.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
