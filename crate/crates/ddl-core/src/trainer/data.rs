//! Byte-level corpus ingestion and deterministic batch sampling.
//!
//! Tokens are raw bytes (vocabulary 256). The final 5% of the corpus is the
//! validation slice. Batch sampling draws random window starts from a
//! seeded ChaCha stream whose position is checkpointable.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone)]
pub struct Corpus {
    bytes: Vec<u8>,
    train_len: usize,
}

impl Corpus {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(bytes)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Corpus("corpus is empty".into()));
        }
        let val_len = bytes.len() / 20; // final 5% held out
        let train_len = bytes.len() - val_len;
        Ok(Corpus { bytes, train_len })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[..self.train_len]
    }

    pub fn validation(&self) -> &[u8] {
        &self.bytes[self.train_len..]
    }
}

/// One batch of next-byte prediction windows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

/// Seeded sampler with a restorable stream position.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    seed: u64,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        BatchSampler { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(word_pos);
        BatchSampler { seed, rng }
    }

    pub fn sample(&mut self, data: &[u8], batch_size: usize, seq_len: usize) -> Result<Batch> {
        if data.len() < seq_len + 1 {
            return Err(Error::Corpus(format!(
                "slice of {} bytes cannot fit a window of {} + 1",
                data.len(),
                seq_len
            )));
        }
        let max_start = data.len() - seq_len - 1;
        let mut inputs = Vec::with_capacity(batch_size * seq_len);
        let mut targets = Vec::with_capacity(batch_size * seq_len);
        for _ in 0..batch_size {
            let start = self.rng.gen_range(0..=max_start);
            inputs.extend(data[start..start + seq_len].iter().map(|&b| b as usize));
            targets.extend(data[start + 1..start + seq_len + 1].iter().map(|&b| b as usize));
        }
        Ok(Batch { inputs, targets, batch_size, seq_len })
    }
}
