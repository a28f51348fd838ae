//! Seeded random streams.
//!
//! Every random draw in a run comes from a substream derived from
//! `(seed, purpose, round, client)`. Derivation is a pure function, so two
//! runs that differ only in the algorithm see the same partition, the same
//! initial model and the same client samples.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Dataset,
    Partition,
    TestSplit,
    Init,
    Sampling,
    Shuffle,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Dataset => 0x6461_7461,
            Purpose::Partition => 0x7061_7274,
            Purpose::TestSplit => 0x7465_7374,
            Purpose::Init => 0x696e_6974,
            Purpose::Sampling => 0x7361_6d70,
            Purpose::Shuffle => 0x7368_7566,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the stream for one `(seed, purpose, round, client)` tuple.
pub fn substream(seed: u64, purpose: Purpose, round: u64, client: u64) -> StreamRng {
    let mut h = splitmix64(seed);
    for word in [purpose.tag(), round, client] {
        h = splitmix64(h ^ word);
    }
    StreamRng::seed_from_u64(h)
}
