//! Parameterized layers shared by the network blocks.
//!
//! A convolution named `X` owns `X.w` (`[Cout, Cin / groups, K, K]`) and
//! `X.b` (`[Cout]`); a layer norm owns `X.gamma` and `X.beta`.

use crate::autodiff::{Init, Scope, Var};
use crate::error::Result;
use crate::real::Real;
use crate::tensor::ConvSpec;

pub const LN_EPS: f64 = 1e-5;

/// Convolution with Kaiming-uniform weight and bias.
pub fn conv<T: Real>(
    s: &Scope<'_, '_, T>,
    name: &str,
    x: &Var<T>,
    c_out: usize,
    spec: ConvSpec,
) -> Result<Var<T>> {
    conv_with_bias(s, name, x, c_out, spec, None)
}

/// As [`conv`], with an explicit bias init.
pub fn conv_with_bias<T: Real>(
    s: &Scope<'_, '_, T>,
    name: &str,
    x: &Var<T>,
    c_out: usize,
    spec: ConvSpec,
    bias: Option<Init>,
) -> Result<Var<T>> {
    let c_in = x.value().channels();
    let shape = spec.weight_shape(c_in, c_out);
    let fan_in = shape[1] * shape[2] * shape[3];
    let s = s.sub(name);
    let w = s.param("w", &shape, Init::kaiming(fan_in))?;
    let b = s.param("b", &[c_out], bias.unwrap_or(Init::kaiming(fan_in)))?;
    x.conv2d(&w, &b, spec)
}

/// Position-wise linear map, realized as a 1x1 convolution.
pub fn linear<T: Real>(
    s: &Scope<'_, '_, T>,
    name: &str,
    x: &Var<T>,
    c_out: usize,
) -> Result<Var<T>> {
    conv(s, name, x, c_out, ConvSpec::dense(1))
}

/// 3x3 depth-wise convolution.
pub fn depthwise<T: Real>(s: &Scope<'_, '_, T>, name: &str, x: &Var<T>) -> Result<Var<T>> {
    let c = x.value().channels();
    conv(s, name, x, c, ConvSpec::depthwise(c))
}

pub fn layer_norm<T: Real>(s: &Scope<'_, '_, T>, name: &str, x: &Var<T>) -> Result<Var<T>> {
    let c = x.value().channels();
    let s = s.sub(name);
    let gamma = s.param("gamma", &[c], Init::Const(1.0))?;
    let beta = s.param("beta", &[c], Init::Const(0.0))?;
    x.layer_norm(&gamma, &beta, LN_EPS)
}
