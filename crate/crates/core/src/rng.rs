//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 seeded with
//! `ChaCha8Rng::seed_from_u64(seed)` and then moved to a fixed stream id, so
//! weight init, sampling and fixture generation never share a sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream used for toy-model weight initialisation.
pub const STREAM_WEIGHTS: u64 = 0;
/// Stream used by the nucleus sampler.
pub const STREAM_SAMPLING: u64 = 1;
/// Stream used by POPE negative sampling.
pub const STREAM_POPE: u64 = 2;
/// Stream used by the anchor perturbation ablation.
pub const STREAM_PERTURB: u64 = 3;
/// Stream used for synthetic fixtures and default prompts.
pub const STREAM_FIXTURES: u64 = 4;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
