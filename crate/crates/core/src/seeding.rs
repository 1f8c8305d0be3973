//! Deterministic seed derivation.
//!
//! Every stochastic object in the laboratory draws from a stream derived
//! from a single root seed and a textual label. The scheme is:
//!
//! 1. hash the label with FNV-1a (64-bit),
//! 2. xor the digest into the root seed,
//! 3. scramble the result once with SplitMix64,
//! 4. seed a ChaCha8 generator with the scrambled value.
//!
//! Identical `(root, label)` pairs therefore yield identical streams on
//! every platform and in every run, and distinct labels give independent
//! streams. Labels are hierarchical by convention, e.g.
//! `"bench/model/3"` or `"phase2/shuffle/17"`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed from a root seed and a stream label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    splitmix64(root ^ fnv1a(label.as_bytes()))
}

/// A deterministic generator for the stream named by `label` under `root`.
pub fn stream(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}
