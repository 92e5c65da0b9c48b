//! Reproducible random numbers.
//!
//! Every stochastic step in the engine (initialization, corruption, shuffling,
//! dropout) draws from [`SeededRng`]: a ChaCha8 stream cipher keyed by a 64-bit
//! seed, with an independent 64-bit stream id per consumer. ChaCha is
//! counter-based, so a `(seed, stream)` pair fully determines the sequence.
//!
//! Derived draws are implemented here rather than taken from `rand` so that
//! their algorithms are pinned:
//! - uniform `f64` in `[0, 1)`: top 53 bits of a `u64`, scaled by 2^-53;
//! - normal deviates: Box–Muller on two uniforms, both outputs used in order;
//! - bounded integers: rejection sampling on the full 64-bit range;
//! - shuffles: Fisher–Yates from the last index down.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Well-known stream ids, so independent consumers of one seed never overlap.
pub mod streams {
    pub const INIT_UNET: u64 = 1;
    pub const INIT_BACKBONE: u64 = 2;
    pub const INIT_HEAD: u64 = 3;
    pub const SPLIT: u64 = 10;
    pub const SHUFFLE: u64 = 11;
    pub const CORRUPT_TRAIN: u64 = 20;
    pub const CORRUPT_VAL: u64 = 21;
    pub const DROPOUT: u64 = 30;
    pub const SYNTH: u64 = 40;
}

#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            inner,
            spare_normal: None,
        }
    }

    /// A child generator for `(seed, stream)` mixed with an extra index, e.g.
    /// an epoch or batch number.
    pub fn derived(seed: u64, stream: u64, index: u64) -> Self {
        Self::with_stream(splitmix(seed ^ splitmix(index.wrapping_add(0x5851_f42d))), stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal deviate (Box–Muller).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in selection order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::with_stream(42, 3);
        let mut b = SeededRng::with_stream(42, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SeededRng::with_stream(42, 4);
        let mut a = SeededRng::with_stream(42, 3);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn uniform_in_range_and_normal_moments() {
        let mut r = SeededRng::new(1);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            let z = r.normal();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn sample_indices_distinct() {
        let mut r = SeededRng::new(9);
        let mut s = r.sample_indices(64, 16);
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 16);
        assert!(s.iter().all(|&i| i < 64));
    }
}
