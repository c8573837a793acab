//! Seed derivation for every random draw in the project.
//!
//! All randomness flows from explicit u64 seeds through ChaCha8, so any
//! artifact (parameter init, corpus waveform, shuffle order) can be
//! regenerated bit-identically from the seeds recorded in manifests and
//! checkpoints.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives a child seed from a base seed and a textual label.
/// Label hashing is FNV-1a; the combined value is finalized with a
/// splitmix64 round so nearby bases do not produce nearby streams.
pub fn derive(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(base ^ h)
}

/// Derives a child seed from a base seed, a label, and an index.
pub fn derive_indexed(base: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive(base, label) ^ splitmix64(index.wrapping_add(0x9e37_79b9)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_stable_and_label_sensitive() {
        assert_eq!(derive(42, "alpha"), derive(42, "alpha"));
        assert_ne!(derive(42, "alpha"), derive(42, "beta"));
        assert_ne!(derive(42, "alpha"), derive(43, "alpha"));
    }

    #[test]
    fn indexed_streams_do_not_collide_over_small_ranges() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..10_000 {
            assert!(seen.insert(derive_indexed(7, "utt", i)));
        }
    }
}
