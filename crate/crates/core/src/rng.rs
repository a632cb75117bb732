//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a base seed and a stream label, so parallel work can be split
//! without sharing a generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// splitmix64 finaliser over `base ^ stream * golden`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(base: u64, label: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, label))
}

/// Stream labels used across modules.
pub mod labels {
    pub const PLACEMENT: u64 = 1;
    pub const MONTE_CARLO: u64 = 2;
    pub const LATENCY: u64 = 3;
    pub const READ_SELECTION: u64 = 4;
    pub const EVICTION: u64 = 5;
    pub const WORKLOAD: u64 = 6;
    pub const FAULTS: u64 = 7;
    pub const RANGE_ASSIGNMENT: u64 = 8;
    pub const REGENERATION: u64 = 9;
    pub const BASELINE: u64 = 10;
}
