//! Deterministic random-stream splitting.
//!
//! Every consumer of randomness (a replication's main chain, each bootstrap
//! replica's weights, Monte-Carlo oracles, ...) gets its own ChaCha stream
//! derived from the master seed and a path of labels. Streams are therefore
//! independent of scheduling: the same `(seed, path)` always yields the same
//! sequence no matter how many threads run or in what order work completes.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Path labels for the fixed stream layout used by experiments.
pub mod label {
    pub const REPLICATION: u64 = 1;
    pub const MAIN_CHAIN: u64 = 2;
    pub const WEIGHTS: u64 = 3;
    pub const POOL: u64 = 4;
    pub const ZEROTH_ORDER: u64 = 5;
    pub const MONTE_CARLO: u64 = 6;
    pub const REFERENCE: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Factory deriving independent ChaCha streams from one master seed.
#[derive(Debug, Clone, Copy)]
pub struct StreamFactory {
    master: u64,
}

impl StreamFactory {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Stream addressed by a label path. The path is folded through
    /// splitmix64, so distinct paths map to distinct ChaCha streams
    /// (collisions are as unlikely as a 64-bit hash collision).
    pub fn stream(&self, path: &[u64]) -> ChaCha12Rng {
        let mut h = splitmix64(self.master);
        for &w in path {
            h = splitmix64(h ^ w);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(self.master);
        rng.set_stream(h);
        rng
    }
}
