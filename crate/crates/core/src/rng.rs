//! Seeded random substreams.
//!
//! A substream is addressed by a master seed and a path of integers
//! (for example `[ARM, term, model]`). Streams with different paths are
//! statistically independent and can be consumed on any thread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a path.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn substream(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

// Path tags, kept distinct so that unrelated consumers never share a stream.
pub(crate) const TAG_CV_FOLDS: u64 = 1;
pub(crate) const TAG_PENALTY_BOOT: u64 = 2;
pub(crate) const TAG_UNIFORM_BAND: u64 = 3;
pub(crate) const TAG_REPLICATION: u64 = 4;
pub(crate) const TAG_CALIBRATION: u64 = 5;
pub(crate) const TAG_DATA: u64 = 6;
