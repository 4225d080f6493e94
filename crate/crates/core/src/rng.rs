//! Deterministic, splittable random numbers.
//!
//! Backed by ChaCha8 in counter mode: the master seed fixes the key and a
//! 64-bit stream id selects an independent keystream. A sweep cell or a
//! trial gets its own stream, so results do not depend on the order (or
//! the thread) in which cells are evaluated.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::param::ParamVector;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a multi-part coordinate (e.g. eta index, momentum index, trial)
/// into one stream id. The id depends only on the coordinates, never on
/// grid sizes.
pub fn stream_id(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5151_5151_5151_5151u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng::substream(seed, 0)
    }

    /// Independent stream `stream` under master seed `seed`.
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        for x in out.iter_mut() {
            *x = StandardNormal.sample(&mut self.inner);
        }
    }

    /// `n` i.i.d. standard normal draws.
    pub fn gaussian_sample(&mut self, n: usize) -> ParamVector {
        let mut v = ParamVector::zeros(n);
        self.fill_gaussian(&mut v);
        v
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
