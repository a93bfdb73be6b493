//! Explicit, seedable random streams.
//!
//! Every stochastic routine takes a generator argument. Monte-Carlo harnesses
//! derive one independent stream per trial from `(seed, trial index)` so that
//! results do not depend on how trials are scheduled across threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Generator seeded from `seed`.
pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator family keyed by `seed`.
pub fn stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws a fresh 64-bit seed from `rng` for a child computation.
pub fn child_seed(rng: &mut impl RngCore) -> u64 {
    rng.next_u64()
}
