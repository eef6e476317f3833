//! Counter-based random draws keyed by (seed, stream, index).
//!
//! Per-point stochastic decisions (discarding, ghost splits) must be
//! reproducible from a seed and independent of iteration order or thread
//! count, so they are derived by hashing a key instead of advancing a
//! stateful generator.

/// Domain tags keep unrelated decision streams decorrelated under the
/// same seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Discard = 0x9d,
    Ghost = 0x67,
    Shuffle = 0x5f,
    Noise = 0xa3,
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Hash a (seed, stream, a, b) key to 64 uniform bits.
#[inline]
pub fn key_bits(seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed ^ (stream as u64).wrapping_mul(0xff51afd7ed558ccd));
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.wrapping_mul(0xc4ceb9fe1a85ec53))
}

/// Uniform draw in [0, 1) from a keyed counter.
#[inline]
pub fn key_uniform(seed: u64, stream: Stream, a: u64, b: u64) -> f64 {
    // 53 mantissa bits give every representable step in [0,1).
    (key_bits(seed, stream, a, b) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
