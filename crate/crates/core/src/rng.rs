//! Named deterministic random streams.
//!
//! Every source of randomness in a run is a ChaCha8 stream derived from the
//! master seed and a string label, so adding a new consumer never shifts an
//! existing stream. A stream checkpoints as `(seed, word position)` and
//! restores mid-sequence exactly.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hash a master seed and stream label into a 32-byte ChaCha seed.
pub fn derive_seed(master: u64, label: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.finalize().into()
}

/// A labeled ChaCha8 stream that remembers its own seed for checkpointing.
#[derive(Debug, Clone)]
pub struct Stream {
    seed: [u8; 32],
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn derive(master: u64, label: &str) -> Self {
        Self::from_seed(derive_seed(master, label))
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        Stream {
            seed,
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    /// Restore a stream captured by [`Stream::state`].
    pub fn from_state(seed: [u8; 32], word_pos: u128) -> Self {
        let mut s = Self::from_seed(seed);
        s.rng.set_word_pos(word_pos);
        s
    }

    /// Exact resume point: `(seed, word position)`.
    pub fn state(&self) -> ([u8; 32], u128) {
        (self.seed, self.rng.get_word_pos())
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}
