//! Deterministic seeded randomness.
//!
//! A single 64-bit seed drives every stochastic choice in the crate. There is
//! no global RNG: callers create a [`SeedRng`] and thread it explicitly, or
//! derive decorrelated child streams with [`SeedRng::derive`] so independent
//! pipeline stages (corpus, init, training, benchmarks) do not share state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG stream. Identical seeds produce identical streams on
/// every platform.
#[derive(Clone, Debug)]
pub struct SeedRng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    /// Seed this stream was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent child stream for a named purpose. The tag keeps
    /// streams decorrelated even when derived from the same parent seed.
    pub fn derive(&self, tag: &str) -> SeedRng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed;
        for b in tag.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        SeedRng::new(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in [0, n). Panics if n == 0.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Uniform integer in [lo, hi].
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    /// Standard normal scaled by `std`, in f32 storage precision.
    pub fn gauss(&mut self, std: f32) -> f32 {
        // Box-Muller on f64, cast down once.
        let u1 = (self.uniform()).max(1e-300);
        let u2 = self.uniform();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        (z as f32) * std
    }

    /// Sample an index from unnormalized non-negative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut dart = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            dart -= w;
            if dart <= 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}
