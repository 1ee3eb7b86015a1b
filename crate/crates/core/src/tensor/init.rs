use rand::Rng;

use crate::error::{Error, Result};

use super::{Float, Tensor};

/// Kaiming-uniform sample: `U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))`.
pub fn kaiming_uniform<F: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<F>> {
    if fan_in == 0 {
        return Err(Error::Config("kaiming init needs fan_in > 0".into()));
    }
    let bound = kaiming_bound(fan_in);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Biases start at zero.
pub fn zero_bias<F: Float>(shape: &[usize]) -> Tensor<F> {
    Tensor::zeros(shape.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bias_is_zero() {
        assert!(zero_bias::<f32>(&[7]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn samples_respect_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = kaiming_uniform::<f64, _>(&[1000], 6, &mut rng).unwrap();
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));
        assert!(kaiming_uniform::<f64, _>(&[2], 0, &mut rng).is_err());
    }

    #[test]
    fn empirical_variance_matches_uniform_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = kaiming_uniform::<f64, _>(&[1_000_000], 6, &mut rng).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 1.0 / 3.0;
        assert!((var - expected).abs() / expected < 0.02, "variance {var}");
    }
}
