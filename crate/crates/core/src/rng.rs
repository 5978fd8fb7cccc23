//! Seeded random streams.
//!
//! Every random draw in a run comes from a ChaCha stream keyed by
//! `(master seed, purpose, round, platform)`. Two different keys never share
//! a stream, so the order in which platforms execute cannot change any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a derived stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Partition = 2,
    Activation = 3,
    LocalTraining = 4,
    Synthetic = 5,
    Evaluation = 6,
}

/// Stream for `(seed, purpose, round, platform)`.
pub fn stream(seed: u64, purpose: Purpose, round: u64, platform: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&round.to_le_bytes());
    key[24..].copy_from_slice(&platform.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
