//! Seed derivation. Every random stream in the pipeline is a ChaCha8 stream
//! keyed by a 64-bit seed mixed from its context (run seed, epoch, record
//! id), so results do not depend on worker count or scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// splitmix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn combine(a: u64, b: u64) -> u64 {
    mix(mix(a) ^ b.rotate_left(17))
}

/// Stable 64-bit digest of a string (first eight bytes of its SHA-256).
pub fn hash_str(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream used for one presentation of one training image.
pub fn presentation_rng(seed: u64, epoch: usize, id: &str) -> Rng {
    seeded(combine(combine(seed, epoch as u64), hash_str(id)))
}

pub fn epoch_rng(seed: u64, epoch: usize) -> Rng {
    seeded(combine(seed ^ 0x005e_ed0f_e90c, epoch as u64))
}
