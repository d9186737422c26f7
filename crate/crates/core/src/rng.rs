//! Deterministic random streams.
//!
//! Every random draw in a run comes from a ChaCha stream keyed by the master
//! seed plus a small path of integers (step, purpose tag, prompt slot,
//! rollout index). A run's random state is therefore just its master seed and
//! its step counter, which makes checkpoints trivially resumable and lets
//! rollout lanes be generated in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Stream = ChaCha8Rng;

/// Purpose tags separating the lanes derived from one master seed.
pub mod tag {
    pub const BATCH: u64 = 1;
    pub const ROLLOUT: u64 = 2;
    pub const REFERENCE: u64 = 3;
    pub const FREEZE: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const PROMPTS: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Serializable master seed from which all lanes are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamSeed(pub u64);

impl StreamSeed {
    pub fn lane_seed(&self, path: &[u64]) -> u64 {
        let mut h = splitmix64(self.0);
        for &p in path {
            h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
        }
        h
    }

    /// Independent stream for the given lane path.
    pub fn lane(&self, path: &[u64]) -> Stream {
        Stream::seed_from_u64(self.lane_seed(path))
    }
}
