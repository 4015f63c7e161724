//! Per-entity deterministic random streams.
//!
//! Every random draw in a run comes from a stream keyed by
//! `(seed, purpose, entity, round, step)`, so results do not depend on the
//! order in which tasks are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Keeps streams for different purposes apart
/// even when the numeric keys coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Partition = 2,
    Init = 3,
    Participants = 4,
    LocalStep = 5,
    Personalize = 6,
    Inference = 7,
    Diagnostics = 8,
    Holdout = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(seed: u64, purpose: Purpose, entity: u64, round: u64, step: u64) -> u64 {
    [purpose as u64, entity, round, step]
        .into_iter()
        .fold(splitmix64(seed), |acc, k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(seed: u64, purpose: Purpose, entity: u64, round: u64, step: u64) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(seed, purpose, entity, round, step))
}
