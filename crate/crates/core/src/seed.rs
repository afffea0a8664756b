//! Deterministic seed derivation.
//!
//! Every random stream in the crate (member initialisation, dropout masks,
//! classifier heads) is keyed by a `u64` derived from a master seed, so a run
//! is reproducible from `(master_seed, config, data)` alone.

/// SplitMix64 finaliser.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from `parent` and a stream index.
#[inline]
pub fn derive(parent: u64, index: u64) -> u64 {
    mix64(parent ^ mix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Seed of ensemble member `index` under `master`.
pub fn member_seed(master: u64, index: usize) -> u64 {
    derive(master, index as u64)
}
