use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::DenseMatrix;

/// Seeded deterministic generator. Identical seed produces an identical
/// sample stream; single-owner, not shareable across threads.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1), 53-bit mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // desk-scale n, modulo bias is negligible but reject anyway
        let zone = u64::MAX - u64::MAX % n as u64;
        loop {
            let x = self.inner.next_u64();
            if x < zone {
                return (x % n as u64) as usize;
            }
        }
    }

    /// Derive an independent stream for a named subcomponent.
    pub fn fork(&mut self, tag: u64) -> Rng {
        let s = self.next_u64() ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        Rng::new(s)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Kaiming-Uniform matrix: i.i.d. samples from the open interval
/// (-1/sqrt(fan_in), +1/sqrt(fan_in)).
pub fn kaiming_uniform(
    rng: &mut Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Result<DenseMatrix> {
    if fan_in == 0 {
        return Err(Error::Argument("kaiming_uniform: fan_in must be >= 1".into()));
    }
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        // resample on the measure-zero chance of hitting the closed bound
        let v = loop {
            let x = -bound + 2.0 * bound * rng.next_f64();
            if x > -bound && x < bound {
                break x;
            }
        };
        data.push(v);
    }
    DenseMatrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn kaiming_rejects_zero_fan_in() {
        let mut rng = Rng::new(0);
        assert!(kaiming_uniform(&mut rng, 2, 2, 0).is_err());
    }

    #[test]
    fn kaiming_bound_fan_in_16() {
        let mut rng = Rng::new(7);
        let m = kaiming_uniform(&mut rng, 20, 20, 16).unwrap();
        assert!(m.data().iter().all(|&x| x > -0.25 && x < 0.25));
    }

    #[test]
    fn kaiming_moments_fan_in_4() {
        let mut rng = Rng::new(11);
        let m = kaiming_uniform(&mut rng, 100, 100, 4).unwrap();
        let n = m.numel() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        let expected = 1.0 / 12.0; // uniform(-b, b) variance b^2/3 with b = 1/sqrt(4)
        assert!((var - expected).abs() / expected < 0.10, "var {var}");
    }

    #[test]
    fn kaiming_deterministic() {
        let a = kaiming_uniform(&mut Rng::new(5), 8, 3, 6).unwrap();
        let b = kaiming_uniform(&mut Rng::new(5), 8, 3, 6).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
