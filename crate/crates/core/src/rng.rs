//! Seed derivation for per-frequency and per-realization random streams.
//!
//! Every stream is a ChaCha generator keyed by a mix of the master seed and
//! a stream label, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `label` under `master`: `master ⊕ hash(label)`.
pub fn derive_seed(master: u64, label: u64) -> u64 {
    master ^ mix64(label)
}

/// Generator for frequency `k` under a master seed.
pub fn frequency_rng(master: u64, k: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(master, k as u64))
}

/// Seed of realization `r` in an ensemble.
pub fn realization_seed(master: u64, r: usize) -> u64 {
    derive_seed(master, 0x5EED_0000_0000_0000 ^ r as u64)
}
