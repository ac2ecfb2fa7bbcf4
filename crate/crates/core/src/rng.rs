//! Portable seeded randomness.
//!
//! Every random decision in the crate flows through [`SeededRng`], whose
//! output is fully determined by a 64-bit seed and reproducible in any
//! language:
//!
//! * state: xoshiro256++ (Blackman & Vigna), seeded from the 64-bit seed by
//!   four successive SplitMix64 outputs;
//! * `uniform()`: `(next_u64 >> 11) * 2^-53`, a double in `[0, 1)`;
//! * `below(k)`: rejection sampling, discarding raw outputs smaller than
//!   `(2^64 - k) mod k`, then `raw mod k`;
//! * `normal()`: Box-Muller cosine branch with `u1 = 1 - uniform()` and
//!   `u2 = uniform()`, drawn in that order, no caching of the sine branch.
//!
//! Child seeds are derived with [`derive_seed`], which folds a list of tags
//! into the parent seed through the SplitMix64 finalizer.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

/// A 64-bit seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    pub fn derive(self, tags: &[u64]) -> Seed {
        Seed(derive_seed(self.0, tags))
    }
}

impl From<u64> for Seed {
    fn from(value: u64) -> Self {
        Seed(value)
    }
}

impl std::fmt::Display for Seed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `tags` into `seed`: `h = mix(h ^ mix(tag + gamma))` for each tag.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(seed.wrapping_add(GOLDEN_GAMMA)), |h, &t| {
        mix64(h ^ mix64(t.wrapping_add(GOLDEN_GAMMA)))
    })
}

/// Stable 64-bit tag for a string (FNV-1a), used to derive per-dataset seeds.
pub fn str_tag(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: Xoshiro256PlusPlus,
}

impl SeededRng {
    pub fn new(seed: Seed) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed.0),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform double in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, k)`. `k` must be positive.
    #[inline]
    pub fn below(&mut self, k: u64) -> u64 {
        debug_assert!(k > 0);
        let threshold = k.wrapping_neg() % k;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % k;
            }
        }
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal deviate.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle, iterating from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
