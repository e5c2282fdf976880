//! Deterministic derivation of independent RNG streams from one base seed.
//!
//! Every stochastic site (weight init, context sampling, per-step dropout,
//! batch shuffling) draws from its own stream so that adding or removing one
//! site never perturbs the draws of another.

/// SplitMix64 finalizer over `base + stream`; distinct streams give
/// decorrelated seeds even when base seeds are small consecutive integers.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
