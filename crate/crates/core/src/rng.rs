//! Seeded random-number streams.
//!
//! Every stochastic component (weight init, batch shuffling, feature mixing,
//! teacher sampling, attack subset choice, data synthesis, ...) draws from its
//! own named stream derived from the run seed. Streams are independent, so
//! disabling one component never shifts the draws seen by another — scheme
//! comparisons stay free of RNG drift.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// FNV-1a 64-bit hash; stable across platforms and runs.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A deterministic RNG for the component `name`, derived from `seed`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Like [`stream`], but additionally keyed by an index (e.g. epoch number),
/// so per-epoch draws are independent of how many draws earlier epochs made.
pub fn stream_indexed(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut key = Vec::with_capacity(name.len() + 8);
    key.extend_from_slice(name.as_bytes());
    key.extend_from_slice(&index.to_le_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(&key));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_name_same_draws() {
        let mut a = stream(7, "shuffle");
        let mut b = stream(7, "shuffle");
        for _ in 0..32 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn different_names_diverge() {
        let mut a = stream(7, "shuffle");
        let mut b = stream(7, "mixup");
        let same = (0..32).filter(|_| a.random::<u64>() == b.random::<u64>()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = stream(7, "init");
        let mut b = stream(8, "init");
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn indexed_streams_are_independent() {
        let mut e0 = stream_indexed(7, "shuffle", 0);
        let mut e1 = stream_indexed(7, "shuffle", 1);
        assert_ne!(e0.random::<u64>(), e1.random::<u64>());
        // Re-derivation reproduces the same sequence.
        let mut e0b = stream_indexed(7, "shuffle", 0);
        for _ in 0..8 {
            let _ = e0.random::<u64>();
        }
        let mut fresh = stream_indexed(7, "shuffle", 0);
        assert_eq!(fresh.random::<u64>(), e0b.random::<u64>());
    }
}
