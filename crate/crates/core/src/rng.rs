//! Seeded random streams.
//!
//! Every stochastic routine takes a `u64` seed and builds its own ChaCha stream,
//! so results do not depend on thread scheduling. Child seeds for replicates,
//! bins and models come from [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for child stream `index` of `root`.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    mix64(mix64(root) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}
