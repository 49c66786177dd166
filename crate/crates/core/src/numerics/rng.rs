//! Seeded random source.
//!
//! The stream is ChaCha8 keyed by the 64-bit seed (`rand_chacha`), with
//! Gaussian draws from the `rand_distr` ziggurat sampler. Both are pure
//! integer/IEEE arithmetic, so a seed gives the same sequence on every
//! platform.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Seed this generator was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n as u64) as usize
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Independent child generator; advances this one by a single draw.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}

/// I.i.d. Gaussian tensor.
pub fn seeded_normal<S: Scalar>(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Result<Tensor<S>> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::Argument(format!("std must be non-negative, got {std}")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::of(mean + std * rng.standard_normal()))
        .collect();
    Tensor::new(shape, data)
}
