//! Named, reproducible random streams derived from a single master seed.
//!
//! Every stage (data generation, splitting, policy sampling, stochastic
//! decisions) draws from its own stream so that any one stage can be replayed
//! without consuming randomness from the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// Well-known stream names.
pub mod streams {
    pub const GENERATION: &str = "generation";
    pub const SPLIT: &str = "split";
    pub const POLICY: &str = "policy";
    pub const DECISIONS: &str = "decisions";
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derive a 64-bit sub-seed for `name` from `master`.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(name)))
}

/// Open stream `index` of the named family under `master`.
///
/// Distinct `(name, index)` pairs give independent ChaCha streams; the same
/// triple always yields the same sequence.
pub fn stream(master: u64, name: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, name));
    rng.set_stream(index);
    rng
}

/// Plain seeded generator, for callers that already hold a stage seed.
pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}
