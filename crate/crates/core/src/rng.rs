//! Seeded random streams. Every consumer (chain, swap step, replicate)
//! gets its own ChaCha stream derived from the master seed, so results do
//! not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream `index` within `domain` of the master seed.
pub fn substream(seed: u64, domain: u32, index: u32) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 32) | index as u64);
    rng
}

pub const DOMAIN_CHAIN: u32 = 1;
pub const DOMAIN_SWAP: u32 = 2;
pub const DOMAIN_REPLICATE: u32 = 3;
pub const DOMAIN_TRUTH: u32 = 4;
pub const DOMAIN_DATA: u32 = 5;

/// A fresh 64-bit seed drawn from a substream; used to give each replicate
/// its own master seed.
pub fn derive_seed(seed: u64, domain: u32, index: u32) -> u64 {
    use rand::RngCore;
    substream(seed, domain, index).next_u64()
}
