//! Keyed random streams.
//!
//! Each replicate draws from ChaCha8 seeded by the run seed with the
//! replicate index as stream id, so replicates can run in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream-id namespaces so that different consumers of one seed never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Dataset = 1,
    Bootstrap = 2,
    Multiplier = 3,
    Calibration = 4,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) ^ index);
    rng
}

/// Derives a child seed, used when one replicate needs its own nested streams
/// (e.g. the bootstrap inside a Monte Carlo replicate).
pub fn child_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    use rand::RngCore;
    stream(seed, purpose, index).next_u64()
}
