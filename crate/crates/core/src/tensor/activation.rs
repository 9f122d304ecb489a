use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::Tensor;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Silu,
    /// Exact erf form `x * Phi(x)`.
    Gelu,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Silu,
        Activation::Gelu,
        Activation::Sigmoid,
        Activation::Softplus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
        }
    }

    #[inline]
    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => T::lit(0.5) * x * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
        }
    }

    /// d/dx of [`eval`](Self::eval), as a function of the input.
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Gelu => {
                let cdf = T::lit(0.5) * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf());
                let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * PI).sqrt());
                cdf + x * pdf
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Softplus => sigmoid(x),
        }
    }

    pub fn apply<T: Real>(self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| self.eval(v))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert_eq!(Activation::Silu.eval(0.0f64), 0.0);
        assert_eq!(Activation::Sigmoid.eval(0.0f64), 0.5);
        // 1 * Phi(1)
        assert!((Activation::Gelu.eval(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((Activation::Softplus.eval(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(Activation::Softplus.eval(1000.0f64), 1000.0);
        assert!(Activation::Softplus.eval(-1000.0f64) >= 0.0);
        assert!(Activation::Sigmoid.eval(-1000.0f64).is_finite());
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        for act in Activation::ALL {
            for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5f64] {
                let fd = (act.eval(x + h) - act.eval(x - h)) / (2.0 * h);
                assert!(
                    (fd - act.derivative(x)).abs() < 1e-8,
                    "{} at {x}: {fd} vs {}",
                    act.name(),
                    act.derivative(x)
                );
            }
        }
    }
}
