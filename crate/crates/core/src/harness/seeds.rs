use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named random substreams. Every stream is its own ChaCha8 sequence keyed
/// by the run seed and the stream id, so drawing from one never shifts
/// another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Env = 1,
    Init = 2,
    Replay = 3,
    KSampler = 4,
    Act = 5,
    Eval = 6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub seed: u64,
}

impl Seeds {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng(&self, stream: Stream) -> ChaCha8Rng {
        self.indexed(stream, 0)
    }

    /// Stream `stream` for sub-run `index` (e.g. one point of a sweep).
    pub fn indexed(&self, stream: Stream, index: u32) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(((stream as u64) << 32) | index as u64);
        r
    }

    /// A `u64` seed for components that build their own generator.
    pub fn derive(&self, stream: Stream, index: u32) -> u64 {
        self.indexed(stream, index).next_u64()
    }
}
