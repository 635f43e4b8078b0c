//! Deterministic counter-based random generator.
//!
//! A splitmix64-style mixer over `seed + counter` keeps every sample a pure
//! function of `(seed, index)`, so training runs and tests replay bit-exactly
//! from a single seed on any platform.

use crate::numerics::Tensor;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, counter: 0 }
    }

    /// Independent stream derived from the same master seed.
    pub fn derive(seed: u64, stream: u64) -> Self {
        RngState::new(mix(seed ^ mix(stream.wrapping_mul(GOLDEN))))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller on two uniforms.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_uniform(); // (0, 1], keeps ln finite
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Unbiased integer in [0, bound) by rejection.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    pub fn uniform_tensor(&mut self, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| self.next_uniform()).collect();
        Tensor::new(shape, data).expect("shape/data agree by construction")
    }

    pub fn normal_tensor(&mut self, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| self.next_normal()).collect();
        Tensor::new(shape, data).expect("shape/data agree by construction")
    }

    /// Uniform in [-limit, limit], used for fan-scaled weight init.
    pub fn uniform_symmetric_tensor(&mut self, shape: Vec<usize>, limit: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| (self.next_uniform() * 2.0 - 1.0) * limit)
            .collect();
        Tensor::new(shape, data).expect("shape/data agree by construction")
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
