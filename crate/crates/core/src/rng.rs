//! Deterministic seed splitting: every consumer of randomness derives its
//! own stream from the run's root seed and a stable label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Independent generator for `(root, label, index)`.
pub fn stream(root: u64, label: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, "init", 0).random();
        let b: u64 = stream(7, "init", 0).random();
        let c: u64 = stream(7, "init", 1).random();
        let d: u64 = stream(8, "init", 0).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
