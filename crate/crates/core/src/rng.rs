//! Seeded generator hierarchy.
//!
//! Every random draw in a run descends from one root seed. Modules ask for a
//! named substream (`"scene"`, `"sft/batch"`, ...) optionally indexed by a
//! step or scene number, so adding draws in one module never shifts the
//! stream seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child node for a named substream.
    pub fn child(&self, label: &str) -> SeedTree {
        SeedTree { seed: derive(self.seed, label, 0) }
    }

    /// Child node for the `index`-th element of a named substream.
    pub fn indexed(&self, label: &str, index: u64) -> SeedTree {
        SeedTree { seed: derive(self.seed, label, index) }
    }

    pub fn rng(&self) -> Rng {
        Rng::seed_from_u64(self.seed)
    }
}

fn derive(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let out = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&out[..8]);
    u64::from_le_bytes(bytes)
}
