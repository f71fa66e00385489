//! Deterministic pseudo-random numbers.
//!
//! The generator is xoshiro256++ whose 256-bit state is filled by four
//! successive outputs of splitmix64 applied to the 64-bit seed (the
//! `seed_from_u64` routine of `rand_xoshiro`). Every derived quantity below
//! is computed from `next_u64` with integer or IEEE-754 operations only, so
//! streams are identical on every platform:
//!
//! * `uniform`: `(next_u64 >> 11) * 2^-53`, a value in `[0, 1)`.
//! * `below(n)`: Lemire's multiply-shift with rejection, unbiased in `[0, n)`.
//! * `normal`: Box-Muller, consuming two uniforms per call and discarding
//!   the sine branch.
//! * `shuffle`: Fisher-Yates from the last index down, using `below`.
//! * `derive(seed, stream)`: seeds a fresh generator from
//!   `splitmix64(seed) ^ splitmix64(stream + 0x9E3779B97F4A7C15)`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One round of splitmix64 on `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Independent stream for a sub-task (init, split, epoch shuffles, ...).
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(splitmix64(seed) ^ splitmix64(stream.wrapping_add(GOLDEN_GAMMA)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal sample.
    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
