//! Stateless seed derivation.
//!
//! Every random stream in the crate is keyed by a tuple of integers (run seed,
//! stream tag, indices) so results never depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes an ordered tuple of integers into a 64-bit key.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x51ED_270B_2A3F_C0DE, |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// Uniform value in `[0, 1)` from a hash.
#[inline]
pub fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Stream tags, kept distinct so no two streams share a key prefix.
pub(crate) mod stream {
    pub const TRAJECTORY: u64 = 1;
    pub const SCAN: u64 = 2;
    pub const LANDMARK: u64 = 3;
    pub const WORLD: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const DECIMATE: u64 = 7;
    pub const HNSW: u64 = 8;
}
