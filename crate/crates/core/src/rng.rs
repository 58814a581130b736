//! Counter-based random streams.
//!
//! Every draw in the toy pipeline comes from a ChaCha8 stream addressed by
//! `(seed, split, sample index, step)`. Streams never share state, so points
//! can be generated in any order or in parallel and still reproduce bit for
//! bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Logical stream families. Values are part of the on-disk determinism
/// contract; do not renumber.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Split {
    Train = 1,
    Bank = 2,
    Calibration = 3,
    IndTest = 4,
    OodTest = 5,
    Centers = 6,
    Scratch = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The per-sample stream address. Call [`SampleStream::step`] to obtain the
/// generator for one diffusion step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleStream {
    key: [u8; 32],
}

impl SampleStream {
    pub fn new(seed: u64, split: Split, index: u64) -> Self {
        Self::from_raw(seed, split as u64, index)
    }

    pub fn from_raw(seed: u64, split: u64, index: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = splitmix64(seed) ^ splitmix64(split.wrapping_mul(0xD134_2543_DE82_EF95));
        state = splitmix64(state ^ index.wrapping_mul(0xA076_1D64_78BD_642F));
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        Self { key }
    }

    /// Generator for `step`; the same address always yields the same sequence.
    pub fn step(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(step);
        rng
    }
}
