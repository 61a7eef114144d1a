//! Seeded randomness helpers shared by the fixture generator and the
//! control-set sampler.
//!
//! All sampling goes through ChaCha8 so that a `(seed, call order)` pair
//! fully determines the output on every platform.

use alloc::vec::Vec;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math;

/// Deterministic stream of uniform and Gaussian samples.
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent stream for a named sub-task. Different labels
    /// yield different streams; the same label always yields the same one.
    pub fn fork(seed: u64, label: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Self::new(seed ^ h)
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` via rejection sampling (unbiased).
    pub fn below(&mut self, bound: u32) -> u32 {
        assert!(bound > 0);
        let zone = u32::MAX - (u32::MAX % bound);
        loop {
            let v = self.inner.next_u32();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Standard normal via the probit transform of a uniform sample.
    pub fn normal(&mut self) -> f64 {
        // uniform() can return exactly 0, which the probit rejects.
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return math::inverse_normal_cdf(u);
            }
        }
    }

    /// Sample `n` distinct indices from `[0, pool_len)` without replacement,
    /// by a partial Fisher-Yates shuffle.
    pub fn sample_indices(&mut self, pool_len: usize, n: usize) -> Vec<usize> {
        assert!(n <= pool_len);
        let mut pool: Vec<usize> = (0..pool_len).collect();
        for i in 0..n {
            let j = i + self.below((pool_len - i) as u32) as usize;
            pool.swap(i, j);
        }
        pool.truncate(n);
        pool
    }
}
