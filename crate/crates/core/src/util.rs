//! Small shared helpers: deterministic seed derivation and stable float sorting.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// splitmix64 finalizer; decent avalanche for seed mixing.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a list of tag words.
///
/// Used everywhere a component needs its own RNG stream (per-image scene
/// seeds, per-parameter init seeds, per-step sampling) so that adding or
/// removing one consumer never shifts another's stream.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ 0xa076_1d64_78bd_642f);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

/// Derive a seed involving a string tag (e.g. a parameter name).
pub fn derive_seed_str(base: u64, tag: &str) -> u64 {
    let mut s = splitmix64(base ^ 0xe703_7ed1_a0b4_28db);
    for b in tag.as_bytes() {
        s = splitmix64(s ^ (*b as u64));
    }
    s
}

/// Deterministic RNG for a derived seed.
pub fn rng_from(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Sort indices by descending key with ascending-index tie-break.
pub fn argsort_desc(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| {
        keys[b]
            .partial_cmp(&keys[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}
