//! Seeded randomness shared by every stage.
//!
//! All randomness flows from ChaCha8 streams keyed by a 64-bit seed and an
//! optional purpose tag, so a given seed yields the same numbers on every
//! platform. Shuffling is a plain Fisher–Yates pass driven by that stream.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// A ChaCha8 stream derived from `seed` and a list of integer tags.
///
/// Distinct tag lists give independent streams. The derivation mixes each
/// word through SplitMix64 so nearby seeds do not produce related streams.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix(seed ^ 0x6e6d_7462_656e_6368);
    for &t in tags {
        state = splitmix(state ^ splitmix(t.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        state = splitmix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform integer in `0..bound` via a 128-bit widening multiply.
pub fn below(rng: &mut impl RngCore, bound: usize) -> usize {
    debug_assert!(bound > 0);
    ((rng.next_u64() as u128 * bound as u128) >> 64) as usize
}

/// Uniform real in `[0, 1)` with 53 bits of precision.
pub fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// In-place Fisher–Yates shuffle, walking from the last slot down.
pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}
