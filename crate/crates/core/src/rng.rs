//! Deterministic random source.
//!
//! The recurrence is SplitMix64: the state advances by the golden-ratio
//! increment `0x9e3779b97f4a7c15` and each output is the state passed through
//! the finalizer `z ^= z >> 30; z *= 0xbf58476d1ce4e5b9; z ^= z >> 27;
//! z *= 0x94d049bb133111eb; z ^= z >> 31`. The seed is used as the initial
//! state verbatim.

use rand_core::{Rng as _, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::real::Real;

#[derive(Debug, Clone)]
pub struct Rng {
    inner: SplitMix64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: SplitMix64::from_seed(seed.to_le_bytes()),
        }
    }

    /// Independent stream for item `index` of a run seeded with `seed`, so
    /// per-item work can be generated in any order.
    pub fn derive(seed: u64, index: u64) -> Self {
        let mut mixer = Rng::new(seed ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03));
        let sub = mixer.next_u64();
        Rng::new(sub)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) from the top 53 bits of one draw.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_range(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(hi >= lo);
        let span = (hi - lo + 1) as u64;
        lo + (self.next_u64() % span) as i64
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal draw via Box-Muller (one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Index drawn from a discrete distribution given by `probs`.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    /// Glorot-uniform weights: uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    pub fn xavier<S: Real>(&mut self, n: usize, fan_in: usize, fan_out: usize) -> Vec<S> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..n)
            .map(|_| S::from_f64(self.uniform_range(-a, a)))
            .collect()
    }
}
