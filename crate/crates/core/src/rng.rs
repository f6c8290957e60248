//! Counter-based random streams.
//!
//! Every random draw in the lab comes from a ChaCha8 keystream. The 256-bit
//! key is the little-endian concatenation of `(seed, purpose, a, b)` and the
//! block counter starts at zero, so a stream is a pure function of that tuple.
//! Training uses `a = step`, `b = sample index`; Monte Carlo shards use
//! `a = shard`. Opening streams in any order, on any thread, yields the same
//! bits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share keystream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Corruption = 2,
    Batch = 3,
    Split = 4,
    Synth = 5,
    MonteCarlo = 6,
    Decode = 7,
    Validation = 8,
}

/// Opens the stream keyed by `(seed, purpose, a, b)`.
pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> LabRng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
