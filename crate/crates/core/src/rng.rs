//! Counter-based random streams.
//!
//! Every random quantity in the sampler is addressed by a key path such as
//! `(seed, "sweep", pass, minibatch, sweep, replica, case, var)`. The value at
//! a key is a pure function of the key, so results do not depend on which
//! worker evaluates a cell or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a, used to turn component names into stream tags.
pub fn tag(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// A position in the keyed random stream tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(mix64(seed ^ GOLDEN))
    }

    /// Root key for a named component under `seed`.
    pub fn named(seed: u64, name: &str) -> Self {
        Self::new(seed).child(tag(name))
    }

    #[inline]
    pub fn child(self, index: u64) -> Self {
        StreamKey(mix64(self.0.rotate_left(23) ^ mix64(index.wrapping_add(GOLDEN))))
    }

    #[inline]
    pub fn bits(self) -> u64 {
        mix64(self.0 ^ 0x5851_f42d_4c95_7f2d)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(self) -> f64 {
        (self.bits() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// A sequential generator seeded from this key, for consumers that need
    /// a variable number of draws (gamma variates, shuffles).
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.bits())
    }
}

impl From<u64> for StreamKey {
    fn from(seed: u64) -> Self {
        StreamKey::new(seed)
    }
}

/// Index of the bucket of `u` in the cumulative distribution of `weights`
/// (unnormalized, total `total`).
#[inline]
pub fn pick(weights: &[f64], total: f64, u: f64) -> usize {
    let target = u * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    // Rounding can leave target == total; fall back to the last positive weight.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(weights.len() - 1)
}
