//! Deterministic RNG stream derivation.
//!
//! Every random draw in the pipeline comes from a ChaCha stream keyed by a
//! master seed plus a purpose tag and indices, so results do not depend on
//! worker count or call interleaving, and resuming mid-run replays the exact
//! stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step; good avalanche for mixing tag/index words.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent RNG from (seed, tag, indices).
pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut h = mix(seed ^ 0x243f6a8885a308d3);
    for b in tag.as_bytes() {
        h = mix(h ^ *b as u64);
    }
    for &ix in indices {
        h = mix(h ^ ix);
    }
    ChaCha8Rng::seed_from_u64(h)
}
