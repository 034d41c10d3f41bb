//! Deterministic seeded randomness.
//!
//! Every stochastic code path in the crate draws from a [`SeedRng`] so that a
//! fixed seed reproduces runs bit-for-bit. Batch work derives one child seed
//! per item up front (in index order) before any parallel dispatch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// ChaCha8-backed RNG with the sampling helpers the pipeline needs.
pub struct SeedRng {
    rng: ChaCha8Rng,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        SeedRng {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform draw on the open interval (0, 1), clamped one ulp away from
    /// both endpoints so `ln` and `ln(-ln)` stay finite.
    pub fn open_unit(&mut self) -> f64 {
        let u: f64 = self.rng.random();
        u.clamp(f64::from_bits(1), 1.0 - f64::EPSILON / 2.0)
    }

    /// Standard Gumbel(0, 1) noise via inverse transform.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.open_unit().ln()).ln()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.open_unit();
        let u2 = self.open_unit();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.open_unit() < p
    }

    /// Categorical sample from (possibly unnormalized non-negative) weights.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let total: f64 = probs.iter().sum();
        let target = self.open_unit() * total;
        let mut acc = 0.0;
        let mut last_nonzero = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                last_nonzero = i;
            }
            acc += p;
            if target < acc {
                return i;
            }
        }
        last_nonzero
    }

    /// Uniformly random `k`-subset of `0..n`, returned sorted.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut picked = rand::seq::index::sample(&mut self.rng, n, k).into_vec();
        picked.sort_unstable();
        picked
    }

    pub fn range(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

/// Derive a child seed for stream `stream` of a parent seed (splitmix64 mix).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeedRng::new(42);
        let mut b = SeedRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.open_unit().to_bits(), b.open_unit().to_bits());
        }
    }

    #[test]
    fn open_unit_stays_inside_interval() {
        let mut rng = SeedRng::new(0);
        for _ in 0..10_000 {
            let u = rng.open_unit();
            assert!(u > 0.0 && u < 1.0);
            assert!((-(-u.ln()).ln()).is_finite());
        }
    }

    #[test]
    fn categorical_respects_masses() {
        let mut rng = SeedRng::new(1);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[rng.categorical(&[0.2, 0.0, 0.8])] += 1;
        }
        assert_eq!(counts[1], 0);
        let f0 = counts[0] as f64 / 30_000.0;
        assert!((f0 - 0.2).abs() < 0.02, "p0 estimate {f0}");
    }

    #[test]
    fn subset_is_sorted_and_in_range() {
        let mut rng = SeedRng::new(9);
        for _ in 0..100 {
            let s = rng.subset(8, 4);
            assert_eq!(s.len(), 4);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            assert!(s.iter().all(|&i| i < 8));
        }
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        let a = derive_seed(7, 0);
        let b = derive_seed(7, 1);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(7, 0));
    }
}
