use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Standard deviation for fresh convolution weights.
pub const WEIGHT_STD: f64 = 0.02;

/// Tensor of N(0, std^2) draws. Sampling happens in f64 so the same seed
/// produces the same values (up to rounding) for f32 and f64 models.
pub fn gaussian<S: Scalar>(rng: &mut ChaCha8Rng, shape: [usize; 4], std: f64) -> Tensor<S> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| S::from_f64(std * rng.sample::<f64, _>(rand_distr::StandardNormal)))
        .collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn gaussian_is_seeded_and_scaled() {
        let a: Tensor<f64> = gaussian(&mut stream(3, 0, 0, 0), [1, 1, 50, 50], WEIGHT_STD);
        let b: Tensor<f64> = gaussian(&mut stream(3, 0, 0, 0), [1, 1, 50, 50], WEIGHT_STD);
        assert_eq!(a, b);
        let n = a.numel() as f64;
        let var = a.data().iter().map(|v| v * v).sum::<f64>() / n;
        // 2500 samples: sample std of variance is ~2.8%, so 15% is a safe gate
        assert!((var.sqrt() - WEIGHT_STD).abs() < 0.15 * WEIGHT_STD, "std {}", var.sqrt());
    }
}
