//! Deterministic derivation of per-unit RNG seeds.
//!
//! Every randomized step (an epoch's shuffle, one query's rollouts, one
//! training example's title permutation) gets its own ChaCha stream seeded
//! from the run seed plus its coordinates. Streams are therefore
//! independent of processing order and stable across runs.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `(base, stream, index)` into one well-distributed seed word.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base).wrapping_add(stream)).wrapping_add(index))
}
