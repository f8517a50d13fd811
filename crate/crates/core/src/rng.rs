//! Seeded random streams.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` whose seed is
//! derived from a root seed plus a path of stream coordinates, so parallel
//! work can be split without sharing generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of coordinates into a single 64-bit seed.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix64(root), |acc, &p| mix64(acc ^ mix64(p.wrapping_add(0x5851_F42D_4C95_7F2D))))
}

pub fn stream(root: u64, path: &[u64]) -> LabRng {
    LabRng::seed_from_u64(derive_seed(root, path))
}

/// Maps a hash to a uniform value in [-1, 1].
pub fn unit_symmetric(h: u64) -> f64 {
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    2.0 * u - 1.0
}
