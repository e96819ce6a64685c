//! Seeded, stream-splittable random numbers.
//!
//! Everything stochastic in the crate draws from ChaCha so that a fixed seed
//! gives bit-identical results across platforms. Streams are derived from
//! (seed, lane indices) rather than sequential draws, which keeps per-row and
//! per-interval randomness independent of batch composition.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG for a (seed, a, b) lane.
pub(crate) fn derive(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(b));
    rng
}

/// Uniform draw in [0, 1).
pub(crate) fn uniform01(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in (0, 1]; safe as the argument of `ln`.
pub(crate) fn uniform_open_closed(rng: &mut impl RngCore) -> f64 {
    1.0 - uniform01(rng)
}

/// Fisher-Yates shuffle driven by the given rng.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}
