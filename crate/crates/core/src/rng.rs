//! Counter-based random streams.
//!
//! Every random number is a pure function of `(key, counter)`, so per-token
//! draws can be evaluated in any order or on any number of threads and still
//! reproduce bit-for-bit. Child streams are derived by hashing a tag into the
//! key; sequential consumers (mask generation, parameter init) get a ChaCha
//! generator seeded from the stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A keyed random stream addressed by a 64-bit counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Stream {
    key: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream {
            key: mix64(seed ^ 0x5eed_5eed_5eed_5eed),
        }
    }

    /// Independent sub-stream identified by `tag`.
    pub fn child(&self, tag: u64) -> Self {
        Stream {
            key: mix64(self.key ^ mix64(tag.wrapping_add(GOLDEN))),
        }
    }

    /// Sub-stream keyed by a string label (stable FNV-1a hash).
    pub fn child_str(&self, label: &str) -> Self {
        self.child(fnv1a(label.as_bytes()))
    }

    #[inline]
    pub fn u64_at(&self, counter: u64) -> u64 {
        mix64(mix64(self.key.wrapping_add(counter.wrapping_mul(GOLDEN))) ^ self.key)
    }

    /// Uniform draw in the open interval (0, 1).
    #[inline]
    pub fn uniform(&self, counter: u64) -> f64 {
        ((self.u64_at(counter) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Sequential generator for consumers that draw a variable number of values.
    pub fn seq(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        for (i, chunk) in seed.chunks_mut(8).enumerate() {
            chunk.copy_from_slice(&self.u64_at(i as u64).to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Inverse-CDF draw from a probability row using a uniform `u` in (0,1).
#[inline]
pub fn draw_categorical(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // u landed in the rounding slack above the cumulative sum
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}
