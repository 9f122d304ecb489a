use super::Tensor;
use crate::error::{arg_err, shape_err, Result};
use crate::real::Real;

fn check<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<usize> {
    let c = x.channels();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(
            "layer_norm",
            format!(
                "channel axis is {c}, gamma {:?}, beta {:?}",
                gamma.shape(),
                beta.shape()
            ),
        );
    }
    if eps.is_nan() || eps <= T::zero() {
        return arg_err("layer_norm", "eps must be positive");
    }
    Ok(c)
}

fn moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, (var + eps).sqrt().recip())
}

/// Normalizes every position over its channel axis:
/// `(x - mean) / sqrt(var + eps) * gamma + beta` (population variance).
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let c = check(x, gamma, beta, eps)?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let (mean, rstd) = moments(row, eps);
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = (*v - mean) * rstd * g + b;
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct LayerNormGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

pub fn layer_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    grad_out: &Tensor<T>,
) -> Result<LayerNormGrads<T>> {
    let c = check(x, gamma, beta, eps)?;
    x.expect_same_shape(grad_out, "layer_norm_backward")?;
    let n = T::lit(c as f64);
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); c];
    let mut gg = vec![T::zero(); c];
    for ((row, grow), drow) in x
        .data()
        .chunks(c)
        .zip(grad_out.data().chunks(c))
        .zip(dx.data_mut().chunks_mut(c))
    {
        let (mean, rstd) = moments(row, eps);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for i in 0..c {
            xhat[i] = (row[i] - mean) * rstd;
            gg[i] = grow[i] * gamma.data()[i];
            dgamma[i] += grow[i] * xhat[i];
            dbeta[i] += grow[i];
            sum_g += gg[i];
            sum_gx += gg[i] * xhat[i];
        }
        for i in 0..c {
            drow[i] = rstd * (gg[i] - sum_g / n - xhat[i] * sum_gx / n);
        }
    }
    Ok(LayerNormGrads {
        dx,
        dgamma: Tensor::new([c], dgamma)?,
        dbeta: Tensor::new([c], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channels_normalize_to_zero() {
        let x = Tensor::<f64>::full([3, 3, 4], 2.5);
        let y = layer_norm(&x, &Tensor::ones([4]), &Tensor::zeros([4]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_values_map_to_unit_pair() {
        let x = Tensor::<f64>::from_f64([1, 2], &[1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &Tensor::ones([2]), &Tensor::zeros([2]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_gamma_passes_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::from_fn([2, 3, 5], |_| rng.random_range(-4.0..4.0));
        let y = layer_norm(&x, &Tensor::zeros([5]), &Tensor::full([5], 7.0), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn output_has_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = 16;
        let x = Tensor::<f64>::from_fn([4, 4, c], |_| rng.random_range(-3.0..3.0));
        let y = layer_norm(&x, &Tensor::ones([c]), &Tensor::zeros([c]), 1e-8).unwrap();
        for row in y.data().chunks(c) {
            let m = row.iter().sum::<f64>() / c as f64;
            let v = row.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / c as f64;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_bad_eps_and_shapes() {
        let x = Tensor::<f64>::zeros([2, 3]);
        assert!(layer_norm(&x, &Tensor::ones([3]), &Tensor::zeros([3]), 0.0).is_err());
        assert!(layer_norm(&x, &Tensor::ones([2]), &Tensor::zeros([3]), 1e-5).is_err());
    }
}
