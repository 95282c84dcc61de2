//! Root-seed splitting. Every consumer of randomness draws from its own
//! stream, derived from the root seed and a fixed label.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const INIT: &str = "init";
pub const SHUFFLE_STAGE_ONE: &str = "shuffle-stage-one";
pub const SHUFFLE_STAGE_TWO: &str = "shuffle-stage-two";
pub const REINIT_ANCHORS: &str = "reinit-anchors";
pub const FEATURES: &str = "features";
pub const SPLIT: &str = "split";
pub const SYNTH: &str = "synth";

pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}
