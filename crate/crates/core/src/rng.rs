//! Deterministic seeded randomness.
//!
//! All randomness flows from one root seed. Named sub-streams let components
//! (town, routes, collect, train, eval) be re-seeded independently without
//! perturbing each other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha12Rng;

/// Derive an independent stream from a root seed and a stream name.
pub fn stream(root_seed: u64, name: &str) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}

/// Derive a sub-stream keyed by an index (e.g., per-route, per-episode).
pub fn substream(root_seed: u64, name: &str, index: u64) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}
