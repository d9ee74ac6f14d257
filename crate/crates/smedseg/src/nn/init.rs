//! Deterministic parameter initialization.
//!
//! Sampling is hand-rolled (Box-Muller over the raw ChaCha stream) so that
//! two builds with the same seed produce bitwise-identical parameters,
//! independent of distribution-crate internals.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// Uniform f64 in [0, 1) with 53 bits of randomness.
fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal via Box-Muller.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = unit(rng).max(f64::MIN_POSITIVE);
    let u2 = unit(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| standard_normal(rng) * std).collect())
}

/// He initialization for convolution / dense weights.
pub fn kaiming_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    normal_tensor(rng, shape, (2.0 / fan_in as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn same_seed_same_draws() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let ta = kaiming_normal(&mut a, &[4, 3, 3, 3], 27);
        let tb = kaiming_normal(&mut b, &[4, 3, 3, 3], 27);
        assert_eq!(ta.data(), tb.data());
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
