//! Seeded random streams.
//!
//! Every simulation uses ChaCha8, a counter-based generator. Independent
//! workers (replicates, folds) derive their generator from the run seed and a
//! stream number through [`substream`], so results do not depend on thread
//! count or scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Recorded in output metadata next to the seed.
pub const RNG_NAME: &str = "ChaCha8Rng (rand_chacha 0.9), seed_from_u64 + set_stream";

pub fn from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for stream `stream` of run `seed`.
pub fn substream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
