//! Deterministic random streams.
//!
//! Every stream is a ChaCha20 generator whose 64-bit seed is derived from the
//! user seed and a list of integer keys with the SplitMix64 finalizer, so a
//! stream depends only on its keys and never on how many draws other streams made.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, keys: &[u64]) -> ChaCha20Rng {
    let mixed = keys.iter().fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)));
    ChaCha20Rng::seed_from_u64(mixed)
}

pub(crate) const TRUTH: u64 = 1;
pub(crate) const SAMPLE: u64 = 2;
pub(crate) const MINIBATCH: u64 = 3;
pub(crate) const FOLDS: u64 = 4;
