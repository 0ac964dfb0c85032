//! Seed discipline.
//!
//! Every random stream in the engine is addressed by a label such as
//! `"round/1/vote/pair/17"` and derived from the master seed through SHA-256,
//! so the whole pipeline is a pure function of `(config, master_seed)` and
//! parallel work never shares a generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derives child seeds from a master seed and a namespace label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedDerivation {
    pub master_seed: u64,
}

impl SeedDerivation {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn seed(&self, label: &str) -> u64 {
        derive_seed(self.master_seed, label)
    }

    pub fn rng(&self, label: &str) -> StreamRng {
        StreamRng::seed_from_u64(self.seed(label))
    }

    /// A child derivation rooted at `label`.
    pub fn child(&self, label: &str) -> SeedDerivation {
        SeedDerivation::new(self.seed(label))
    }
}

/// First eight bytes (little endian) of `SHA-256(le_bytes(seed) || label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

pub fn rng_from_seed(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}
