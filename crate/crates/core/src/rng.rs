//! Named, independent random streams derived from one master seed.
//!
//! Every consumer of randomness in a run draws from its own ChaCha stream so that
//! adding or removing one consumer (for example evaluation) never shifts the
//! numbers seen by another.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Env = 1,
    InitActive = 2,
    InitPassive = 3,
    Exploration = 4,
    ReplaySampling = 5,
    Evaluation = 6,
    PassiveEnv = 7,
    PassiveExploration = 8,
    Mixing = 9,
    PassiveExtraBatches = 10,
    Probes = 11,
}

/// Returns the generator for `stream`, sub-indexed by `index` (e.g. the iteration).
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 40) | (index & ((1 << 40) - 1)));
    rng
}

/// Derives a plain integer seed, for APIs that take one.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    stream_rng(seed, stream, index).next_u64()
}
