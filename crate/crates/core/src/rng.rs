//! Deterministic RNG stream derivation.
//!
//! Every random draw in the system comes from a ChaCha stream derived from
//! the experiment seed plus a role tag (and usually a client id and/or round
//! index). Streams never depend on thread scheduling, so runs are bit-identical
//! for any worker-pool size.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Role tags for stream derivation. Fixed constants: changing one changes
/// every realized experiment, so they are append-only.
pub mod stream {
    pub const DATASET: u64 = 0x01;
    pub const PARTITION: u64 = 0x02;
    pub const STYLE: u64 = 0x03;
    pub const SPLIT: u64 = 0x04;
    pub const CLIENT_INIT: u64 = 0x05;
    pub const AGG_INIT: u64 = 0x06;
    pub const SAMPLE: u64 = 0x07;
    pub const LOCAL: u64 = 0x08;
    pub const GRAD_CHECK: u64 = 0x09;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent ChaCha stream from `seed` and a tag path.
/// The tags are folded through splitmix64 so nearby (seed, tag) pairs do not
/// produce correlated streams.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x6a09_e667_f3bc_c908;
    let mut mixed = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0xd6e8_feb8_6659_fd93);
        mixed ^= splitmix64(&mut state);
    }
    ChaCha8Rng::seed_from_u64(mixed)
}
