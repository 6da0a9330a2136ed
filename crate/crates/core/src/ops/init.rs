use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// I.i.d. samples from `U[−√(6/fan_in), +√(6/fan_in)]`.
pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::invalid("kaiming init needs fan_in >= 1"));
    }
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.uniform(-bound, bound))).collect();
    Tensor::from_vec(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_from_fan_in() {
        let mut rng = Rng::new(0);
        let t: Tensor<f64> = kaiming_uniform(&[50, 20], 6, &mut rng).unwrap();
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));
        assert!(t.max_abs() > 0.9);
    }

    #[test]
    fn deterministic_per_seed() {
        let a: Tensor<f32> = kaiming_uniform(&[3, 4], 12, &mut Rng::new(5)).unwrap();
        let b: Tensor<f32> = kaiming_uniform(&[3, 4], 12, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_mean_within_three_sigma() {
        let n = 100_000;
        let t: Tensor<f64> = kaiming_uniform(&[n], 6, &mut Rng::new(99)).unwrap();
        let mean = t.sum() / n as f64;
        // U[-1,1] has variance 1/3.
        let sigma = (1.0f64 / 3.0 / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn zero_fan_in_is_rejected() {
        assert!(kaiming_uniform::<f32>(&[2], 0, &mut Rng::new(1)).is_err());
    }
}
