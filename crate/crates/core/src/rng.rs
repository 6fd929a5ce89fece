//! Named seed derivation.
//!
//! Every random stream in the crate is obtained from a master seed plus a
//! path of labels (component, purpose, index). Streams never depend on
//! scheduling order, so parallel and sequential runs agree bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derives a 64-bit seed from a master seed and a label path.
pub fn derive_seed(master: u64, path: &[&str], index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for part in path {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(master: u64, path: &[&str], index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, path, index))
}
