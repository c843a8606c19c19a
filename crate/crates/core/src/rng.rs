//! Seeded random source.
//!
//! The stream is ChaCha8 keyed from a 64-bit seed (`SeedableRng::seed_from_u64`);
//! normal variates use the ziggurat sampler from `rand_distr::StandardNormal`.
//! Both are fixed algorithms, so a seed reproduces the same bits on a given
//! platform.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
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

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this seed and a label.
    pub fn fork(&self, label: u64) -> Rng {
        let mixed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(label.wrapping_mul(0xD1B5_4A32_D192_ED03))
            ^ 0x5851_F42D_4C95_7F2D;
        Rng::new(mixed)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p >= 1.0 {
            return true;
        }
        if p <= 0.0 {
            return false;
        }
        self.uniform() < p
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f32) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| (self.normal() as f32) * std).collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape product matches length")
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| lo + (hi - lo) * self.uniform() as f32)
            .collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape product matches length")
    }
}
