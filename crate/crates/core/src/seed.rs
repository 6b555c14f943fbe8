//! Named sub-seeds derived from a single run seed.
//!
//! Every stochastic stage (repartition, downsampling, augmentation, weight
//! initialization, batch shuffling, dropout) draws from its own stream so that
//! changing one stage never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator used throughout the crate.
pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedBank {
    root: u64,
}

impl SeedBank {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Sub-seed for a named stage.
    pub fn derive(&self, stage: &str) -> u64 {
        mix(self.root ^ fnv1a(stage.as_bytes()))
    }

    /// Sub-seed for a named stage with an integer discriminator (epoch, grid cell).
    pub fn derive_indexed(&self, stage: &str, index: u64) -> u64 {
        mix(self.derive(stage) ^ mix(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
    }

    pub fn rng(&self, stage: &str) -> Rng {
        Rng::seed_from_u64(self.derive(stage))
    }

    pub fn rng_indexed(&self, stage: &str, index: u64) -> Rng {
        Rng::seed_from_u64(self.derive_indexed(stage, index))
    }

    /// A bank rooted at a derived seed, for nested runs (sweep cells).
    pub fn child(&self, stage: &str, index: u64) -> SeedBank {
        SeedBank::new(self.derive_indexed(stage, index))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
