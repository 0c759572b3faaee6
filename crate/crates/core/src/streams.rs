//! Derived deterministic RNG streams.
//!
//! Every stochastic stage (class construction, per-example sampling, epoch
//! shuffles) draws from its own stream, keyed by `(seed, tag, index)`. This
//! makes generation order-independent and lets a resumed training run
//! re-derive exactly the streams an uninterrupted run would have used.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_PROTOTYPES: u64 = 1;
pub const TAG_CLASSES: u64 = 2;
pub const TAG_TRAIN_EXAMPLE: u64 = 3;
pub const TAG_TEST_EXAMPLE: u64 = 4;
pub const TAG_EPOCH_SHUFFLE: u64 = 5;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn absorb(h: u64, v: u64) -> u64 {
    mix(h ^ v.wrapping_mul(GOLDEN))
}

pub fn derive(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut h = absorb(mix(seed.wrapping_add(GOLDEN)), tag);
    h = absorb(h, index);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        h = mix(h.wrapping_add(GOLDEN));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
