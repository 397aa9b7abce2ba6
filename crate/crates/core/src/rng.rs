//! Counter-based random streams.
//!
//! Draws are a pure function of `(seed, stream, counter)` using the
//! SplitMix64 generator (Steele et al., "Fast splittable pseudorandom
//! number generators"): integer-only mixing, so identical state yields
//! identical output on any platform. Distinct stream ids produce
//! independent sequences.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream {
            seed,
            stream,
            counter: 0,
        }
    }

    /// Child stream keyed by a tag; used to hand out independent streams
    /// (data order, init, per-level noise) from one run seed.
    pub fn derive(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, mix(self.stream ^ mix(tag ^ GOLDEN)))
    }

    pub fn state(&self) -> (u64, u64, u64) {
        (self.seed, self.stream, self.counter)
    }

    pub fn next_u64(&mut self) -> u64 {
        let key = mix(self.seed ^ mix(self.stream ^ 0x6A09_E667_F3BC_C909));
        self.counter = self.counter.wrapping_add(1);
        mix(key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n) by rejection (no modulo bias).
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via the Marsaglia polar method (ln and sqrt only).
    pub fn next_normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    pub fn normal_tensor<S: Scalar>(&mut self, shape: &[usize]) -> Tensor<S> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::of_f64(self.next_normal())).collect();
        Tensor::new(shape.to_vec(), data).expect("valid shape")
    }

    pub fn uniform_tensor<S: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<S> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::of_f64(lo + self.next_f64() * (hi - lo)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("valid shape")
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_state_same_draws() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        let ta: Tensor<f32> = a.normal_tensor(&[128]);
        let tb: Tensor<f32> = b.normal_tensor(&[128]);
        assert_eq!(ta.data(), tb.data());
        assert_eq!(a.state(), b.state());
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = RngStream::new(42, 0);
        let mut b = RngStream::new(42, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut r = RngStream::new(1234, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| r.next_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn uniform_range_half_open() {
        let mut r = RngStream::new(5, 5);
        let t: Tensor<f32> = r.uniform_tensor(&[10_000], -1.0, 1.0);
        assert!(t.data().iter().all(|&v| (-1.0..1.0).contains(&v)));
    }

    #[test]
    fn counter_advances_per_draw() {
        let mut r = RngStream::new(0, 0);
        r.next_u64();
        r.next_u64();
        assert_eq!(r.state().2, 2);
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut r = RngStream::new(9, 3);
        let mut v: Vec<usize> = (0..100).collect();
        r.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, (0..100).collect::<Vec<_>>());
    }
}
