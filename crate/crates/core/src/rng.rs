//! Seed derivation and named random streams.
//!
//! Every random draw in an experiment comes from a ChaCha stream keyed by a
//! seed derived from the master seed and a path such as
//! `(environment index)` or `(environment index, run index)`. Runs never
//! share a stream, so adding runs or environments leaves earlier ones
//! untouched and the order in which workers finish does not matter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Independent stream identifiers under a single seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Environment = 1,
    Noise = 2,
    Decisions = 3,
}

/// Domain tags used as the first element of a derivation path.
pub mod domain {
    pub const ENVIRONMENT: u64 = 0x454e_5649;
    pub const RUN: u64 = 0x5255_4e53;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `path` into `master` to get a child seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream_rng(seed: u64, stream: Stream) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
