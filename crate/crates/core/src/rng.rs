//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] keyed by the
//! master seed, with the 64-bit ChaCha stream id selecting an independent
//! sequence. ChaCha is counter based, so stream `k` of seed `s` is a pure
//! function of `(s, k)` and per-point streams can be generated in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Identity string recorded in run metadata.
pub const RNG_IDENTITY: &str = "ChaCha8 (rand_chacha 0.9), key = seed_from_u64(master), stream = purpose id";

/// Purpose tags for the high bits of a stream id.
pub mod purpose {
    pub const FEATURE: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const TRAIN_DATA: u64 = 3;
    pub const TEST_DATA: u64 = 4;
    pub const INIT: u64 = 5;
    pub const DOWNSTREAM: u64 = 6;
    pub const SWEEP: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const MISC: u64 = 9;
}

/// Master seed wrapper that hands out independent streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    master: u64,
}

impl Streams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Stream for `(purpose, index)`; the purpose occupies the top 16 bits.
    pub fn stream(&self, purpose: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream((purpose << 48) ^ (index & 0x0000_FFFF_FFFF_FFFF));
        rng
    }

    /// A derived master seed, for sub-experiments that need their own `Streams`.
    pub fn child(&self, purpose: u64, index: u64) -> Streams {
        use rand::RngCore;
        Streams::new(self.stream(purpose, index).next_u64())
    }
}
