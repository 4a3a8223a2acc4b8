//! Named random sub-streams derived from a single root seed.
//!
//! Every consumer of randomness asks for a stream by name plus a list of
//! integer coordinates (batch, client id, round ...). The stream seed is a
//! SHA-256 digest of those inputs, so editing one part of a configuration
//! never shifts the random numbers seen by an unrelated component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const SAMPLING: &str = "sampling";
pub const SYNTHESIS: &str = "synthesis";
pub const LOCAL: &str = "local";
pub const PARTITION: &str = "partition";
pub const SCHEDULE: &str = "schedule";
pub const EMBEDDING: &str = "embedding";

pub fn stream_seed(root: u64, name: &str, coords: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    for c in coords {
        hasher.update(c.to_le_bytes());
    }
    hasher.finalize().into()
}

pub fn stream(root: u64, name: &str, coords: &[u64]) -> StreamRng {
    ChaCha8Rng::from_seed(stream_seed(root, name, coords))
}
