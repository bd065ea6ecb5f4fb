//! Counter-based random streams keyed on `(master_seed, level, sample_index, replica_tag)`.
//!
//! Each stream is a ChaCha8 keystream whose 256-bit key is a splitmix64 hash of
//! the tuple, so any sample's randomness can be regenerated in isolation, on
//! any thread, in any order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};

/// Distribution of the variates produced by [`SeedStream::draw`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variate {
    StandardNormal,
    Uniform { lo: f64, hi: f64 },
}

/// One deterministic random stream.
#[derive(Debug, Clone)]
pub struct SeedStream {
    master_seed: u64,
    level: usize,
    sample_index: u64,
    replica_tag: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_key(master_seed: u64, level: usize, sample_index: u64, replica_tag: u64) -> [u8; 32] {
    let mut state = 0x6A09_E667_F3BC_C909u64;
    for word in [master_seed, level as u64, sample_index, replica_tag] {
        let mut s = state ^ word;
        state = splitmix64(&mut s);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

/// Build the stream for one `(master_seed, level, sample_index, replica_tag)` tuple.
pub fn derive_stream(master_seed: u64, level: usize, sample_index: u64, replica_tag: u64) -> SeedStream {
    SeedStream {
        master_seed,
        level,
        sample_index,
        replica_tag,
        rng: ChaCha8Rng::from_seed(stream_key(master_seed, level, sample_index, replica_tag)),
    }
}

impl SeedStream {
    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn sample_index(&self) -> u64 {
        self.sample_index
    }

    pub fn replica_tag(&self) -> u64 {
        self.replica_tag
    }

    /// The next `count` variates of the stream.
    pub fn draw(&mut self, kind: Variate, count: usize) -> Result<Vec<f64>> {
        match kind {
            Variate::StandardNormal => Ok((0..count)
                .map(|_| StandardNormal.sample(&mut self.rng))
                .collect()),
            Variate::Uniform { lo, hi } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::param(format!("uniform bounds [{lo}, {hi}] are not an interval")));
                }
                let dist = Uniform::new_inclusive(lo, hi).map_err(|e| Error::param(e.to_string()))?;
                Ok((0..count).map(|_| dist.sample(&mut self.rng)).collect())
            }
        }
    }

    /// Fill `out` with standard normal variates.
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out.iter_mut() {
            *x = StandardNormal.sample(&mut self.rng);
        }
    }

    /// Uniform integer in `0..n`; used for bootstrap resampling.
    pub fn index_below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn fill_bytes(&mut self, out: &mut [u8]) {
        self.rng.fill_bytes(out)
    }
}
