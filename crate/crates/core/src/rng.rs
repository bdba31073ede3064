//! Named random streams.
//!
//! Every stream is a ChaCha8 generator seeded from the run's master seed
//! via `seed_from_u64` and separated by its ChaCha stream id, so drawing
//! from one stream never perturbs another. The full generator state is
//! serializable and goes into checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stream {
    Init,
    DiffusionNoise,
    DataShuffle,
    Sampling,
    Data,
}

impl Stream {
    pub fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::DiffusionNoise => 2,
            Stream::DataShuffle => 3,
            Stream::Sampling => 4,
            Stream::Data => 5,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

pub fn standard_normal(rng: &mut ChaCha8Rng) -> f32 {
    StandardNormal.sample(rng)
}

pub fn fill_normal(rng: &mut ChaCha8Rng, out: &mut [f32]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

/// Serializable snapshot of a [`ChaCha8Rng`] position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub name: String,
    /// 32-byte key, hex encoded.
    pub key: String,
    pub stream: u64,
    /// Word position (u128) as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(name: impl Into<String>, rng: &ChaCha8Rng) -> Self {
        let key = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            name: name.into(),
            key,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Checkpoint(CheckpointError::Manifest(format!("rng `{}`: {what}", self.name)));
        if self.key.len() != 64 {
            return Err(bad("key must be 64 hex digits"));
        }
        let mut key = [0u8; 32];
        for (i, b) in key.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.key[2 * i..2 * i + 2], 16).map_err(|_| bad("bad hex"))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("bad word position"))?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}
