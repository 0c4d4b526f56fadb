//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng` keyed
//! by a 64-bit seed derived from a parent seed plus a small tuple of labels,
//! so results never depend on evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `parts` into `seed`. Stable across platforms and releases.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(seed: u64, parts: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream labels used with [`derive_seed`].
pub(crate) mod stream {
    pub const TRAIN_NOISE: u64 = 1;
    pub const DECODER_INIT: u64 = 2;
    pub const MI: u64 = 3;
    pub const UPDATE: u64 = 4;
    pub const POPULATION: u64 = 5;
    pub const RESPONDER: u64 = 6;
    pub const RANDOM_POLICY: u64 = 7;
    pub const ELBO: u64 = 8;
}
