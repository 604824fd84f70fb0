//! Named random streams derived from one master seed.
//!
//! Each consumer (data, augmentation, masks, init, ...) gets its own
//! generator, so disabling one consumer never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const STREAM_DATA: &str = "data";
pub const STREAM_AUGMENT: &str = "augment";
pub const STREAM_BATCHES: &str = "batches";
pub const STREAM_MASKS: &str = "masks";
pub const STREAM_INIT: &str = "init";

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Seed of the named stream under `master`.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    splitmix64(splitmix64(master) ^ fnv1a(stream.as_bytes()))
}

/// Independent generator for the named stream.
pub fn stream(master: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, name))
}
