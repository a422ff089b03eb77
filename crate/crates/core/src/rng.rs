//! Named random sub-streams derived from a single run seed.
//!
//! Every consumer of randomness draws from its own ChaCha stream so that
//! changing how much one component consumes never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Data,
    Sampling,
    Corpus,
    Bench,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Data => 2,
            Stream::Sampling => 3,
            Stream::Corpus => 4,
            Stream::Bench => 5,
        }
    }
}

pub fn stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
