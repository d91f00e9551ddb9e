//! Reproducible random streams.
//!
//! Every randomized routine draws from ChaCha8 keyed by a 64-bit seed, with
//! the ChaCha stream id set to a task index (trial, permutation). Streams
//! with distinct indices are independent, so tasks can run in any order or
//! in parallel and still produce identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
