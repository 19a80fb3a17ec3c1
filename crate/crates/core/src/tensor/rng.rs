//! Deterministic counter-based random number generation.
//!
//! The k-th output is a pure function of `(seed, k)`, so a given seed replays
//! the identical sample sequence on every platform and the generator can be
//! split into independent substreams without shared state.

use std::f64::consts::TAU;

// Golden-ratio increment and finalizer from SplitMix64.
const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based pseudo-random generator.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// Independent stream derived from `(seed, index)`; order-insensitive, so
    /// parallel consumers indexed by sample id stay reproducible.
    pub fn substream(&self, index: u64) -> Rng {
        Rng {
            seed: mix(self.seed ^ mix(index.wrapping_add(1).wrapping_mul(GAMMA))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` using the top 53 bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the Box-Muller cosine branch; consumes exactly two
    /// uniforms per variate. The first uniform is shifted into `(0, 1]` so the
    /// logarithm is always finite.
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
    }

    /// Normal truncated to two standard deviations, by rejection.
    pub fn truncated_normal(&mut self) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z;
            }
        }
    }

    /// Uniform integer in `[0, n)` via the widening-multiply map (no modulo
    /// bias worth caring about at 64 bits).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// `k` distinct indices drawn from `[0, n)` by partial Fisher-Yates.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn frozen_first_outputs() {
        // Pins the documented (seed, counter) -> output map; a change here is
        // a silent break of every stored seed.
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0xe220a8397b1dcdaf);
        assert_eq!(r.next_u64(), 0x6e789e6aa1b965f4);
        let mut r = Rng::new(1);
        assert_eq!(r.next_u64(), 0x910a2dec89025cc1);
    }

    #[test]
    fn substreams_are_decorrelated_and_stable() {
        let root = Rng::new(7);
        let mut s0 = root.substream(0);
        let mut s1 = root.substream(1);
        assert_ne!(s0.next_u64(), s1.next_u64());
        let mut s0b = root.substream(0);
        let mut again = Rng::new(7).substream(0);
        assert_eq!(s0b.next_u64(), again.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(3);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn sample_distinct_is_distinct_and_in_range() {
        let mut r = Rng::new(11);
        let picks = r.sample_distinct(200, 128);
        assert_eq!(picks.len(), 128);
        let mut seen = vec![false; 200];
        for &p in &picks {
            assert!(p < 200);
            assert!(!seen[p], "duplicate index {p}");
            seen[p] = true;
        }
    }
}
