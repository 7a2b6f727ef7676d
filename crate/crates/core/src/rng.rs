//! Counter-based random streams.
//!
//! Every consumer draws from a ChaCha8 stream selected by `(seed, stream id)`,
//! so results never depend on the order in which streams are created or on
//! which thread consumes them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn named_stream(seed: u64, name: &str) -> Rng {
    stream(seed, fnv1a(name.as_bytes()))
}

/// Stream ids reserved per purpose, combined with a per-item counter.
pub mod purpose {
    pub const PRIOR_SAMPLE: u64 = 1 << 56;
    pub const MEAN_LATENT: u64 = 2 << 56;
    pub const SPLIT: u64 = 3 << 56;
    pub const PERTURB: u64 = 4 << 56;
    pub const EPOCH_ORDER: u64 = 5 << 56;
    pub const RANDOM_INIT: u64 = 6 << 56;
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
