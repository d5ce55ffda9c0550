//! Seeded random streams.
//!
//! Every run derives its randomness from one integer seed. Independent
//! consumers (initialization, shuffling, noise, verification trials) draw from
//! separate ChaCha streams so that adding draws to one never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named substreams of a run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle,
    Noise,
    Verify,
    Split,
    Data,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Shuffle => 2,
            Stream::Noise => 3,
            Stream::Verify => 4,
            Stream::Split => 5,
            Stream::Data => 6,
        }
    }
}

/// RNG for `stream` under `seed`.
pub fn substream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// RNG for an indexed item (trial, sweep point) within a stream.
pub fn indexed(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream.id());
    rng
}
