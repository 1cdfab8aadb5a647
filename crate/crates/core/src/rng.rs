//! Deterministic, splittable random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit key. Child streams
//! are derived by hashing the parent key with an integer tag, so a sample's
//! randomness depends only on its path of tags and never on how many values
//! other streams consumed.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    key: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let key = mix64(seed);
        Rng {
            key,
            inner: ChaCha8Rng::seed_from_u64(key),
        }
    }

    /// Independent child stream; identical `(parent key, tag)` give identical streams.
    pub fn split(&self, tag: u64) -> Rng {
        let key = mix64(self.key ^ mix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)));
        Rng {
            key,
            inner: ChaCha8Rng::seed_from_u64(key),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution (integer path only).
    pub fn uniform(&mut self) -> f32 {
        (self.inner.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    pub fn uniform_in(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // Lemire's multiply-shift; bias is negligible for the ranges used here.
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn normal(&mut self) -> f32 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize) -> alloc::vec::Vec<f32> {
        (0..n).map(|_| self.normal()).collect()
    }
}
