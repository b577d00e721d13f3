//! Deterministic random streams.
//!
//! Every source of randomness draws from its own stream, derived from the
//! run seed and a purpose tag. Streams are independent of each other and of
//! draw order elsewhere, so adding a consumer never perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// RNG for `(seed, tag)`. The tag hash plus folded tag bytes fill the key,
/// so distinct tags give unrelated streams.
pub fn derive_rng(seed: u64, tag: &str) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(tag.as_bytes()).to_le_bytes());
    for (i, &b) in tag.as_bytes().iter().enumerate() {
        key[16 + (i % 16)] ^= b.rotate_left((i / 16) as u32 % 8);
    }
    ChaCha12Rng::from_seed(key)
}
