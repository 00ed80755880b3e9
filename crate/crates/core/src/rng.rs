//! Seeded random streams.
//!
//! All randomness in the crate goes through [`SeededRng`], a thin wrapper
//! around ChaCha8 (`rand_chacha`). ChaCha is a counter-based generator whose
//! output depends only on `(seed, stream, word position)`, so the same seed
//! yields the same sequence on every platform. Independent sub-streams are
//! obtained with [`SeededRng::fork`], which keeps the seed and selects a
//! different ChaCha stream id.

use rand::distr::{Distribution, Uniform};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A fresh generator on ChaCha stream `stream` of the same seed.
    ///
    /// Forks do not depend on how far `self` has advanced.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    /// `n` draws from the half-open interval `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
        if lo >= hi || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(
                "range",
                format!("uniform range needs finite lo < hi, got [{lo}, {hi})"),
            ));
        }
        let dist = Uniform::new(lo, hi).map_err(|e| Error::invalid("range", e.to_string()))?;
        Ok((0..n).map(|_| dist.sample(&mut self.inner)).collect())
    }

    /// `n` draws from `N(0, std²)`.
    pub fn normal(&mut self, std: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.inner);
                z * std
            })
            .collect()
    }

    /// A single draw from `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}
