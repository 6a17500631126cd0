//! Named, counter-based random streams.
//!
//! Every random draw in a run is taken from a ChaCha stream addressed by
//! `(seed, name, index)`. Streams are independent of evaluation order, so a
//! batch of paths can be simulated serially or in parallel and produce the
//! same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as StreamRng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derives a 64-bit key from a run seed, a stream name and a sub-key.
pub fn stream_key(seed: u64, name: &str, sub: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(name)) ^ splitmix64(sub.wrapping_add(1)))
}

/// Stream `index` of the generator keyed by `(seed, name, sub)`.
pub fn stream(seed: u64, name: &str, sub: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, name, sub));
    rng.set_stream(index);
    rng
}

/// Source of per-path generators for one simulation batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSeed {
    pub seed: u64,
    pub name: &'static str,
    pub sub: u64,
}

impl StreamSeed {
    pub fn new(seed: u64, name: &'static str, sub: u64) -> Self {
        Self { seed, name, sub }
    }

    pub fn path(&self, index: usize) -> ChaCha8Rng {
        stream(self.seed, self.name, self.sub, index as u64)
    }

    pub fn child(&self, sub: u64) -> Self {
        Self {
            seed: self.seed,
            name: self.name,
            sub: stream_key(self.seed, self.name, self.sub) ^ sub,
        }
    }
}
