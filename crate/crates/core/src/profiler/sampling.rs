//! Deterministic per-task sampling for scatter data.

use crate::tasking::Guid;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform value in [0, 1) determined by `(guid, seed)`.
#[inline]
pub fn sample_point(guid: Guid, seed: u64) -> f64 {
    let state = splitmix64(seed).wrapping_add(guid.0.wrapping_mul(GOLDEN));
    (splitmix64(state) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Whether the task instance `guid` contributes a scatter sample.
#[inline]
pub fn should_sample(guid: Guid, fraction: f64, seed: u64) -> bool {
    if fraction <= 0.0 {
        return false;
    }
    if fraction >= 1.0 {
        return true;
    }
    sample_point(guid, seed) < fraction
}

/// Number of guids in `[first, first + count)` accepted at `fraction`.
pub fn sampled_count_sequential(first: u64, count: u64, fraction: f64, seed: u64) -> u64 {
    (first..first + count).filter(|&g| should_sample(Guid(g), fraction, seed)).count() as u64
}

/// Same as [`sampled_count_sequential`], split across the rayon pool when
/// the `parallel` feature is on.
pub fn sampled_count(first: u64, count: u64, fraction: f64, seed: u64) -> u64 {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (first..first + count).into_par_iter().filter(|&g| should_sample(Guid(g), fraction, seed)).count() as u64
    }
    #[cfg(not(feature = "parallel"))]
    {
        sampled_count_sequential(first, count, fraction, seed)
    }
}
