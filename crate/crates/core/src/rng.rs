//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit generator. Parallel tasks
//! derive their own stream from a base seed so results never depend on
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StdRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> StdRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for the `index`-th independent task under `base`.
pub fn task_stream(base: u64, index: u64) -> StdRng {
    seeded(base.wrapping_add(index))
}

/// Independent sub-stream of a task, keyed by a small tag so that adding a
/// stage does not shift the draws of the others.
pub fn substream(seed: u64, tag: u64) -> StdRng {
    let mut rng = seeded(seed);
    rng.set_stream(tag);
    rng
}
