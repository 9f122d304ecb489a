use rayon::prelude::*;

use super::Tensor;
use crate::error::{shape_err, Result};
use crate::real::Real;

/// Dense `[M, K] x [K, N]` product.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return shape_err("matmul", format!("inner axes differ: {k} vs {k2}"));
    }
    let bd = b.data();
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n)
        .zip(a.data().par_chunks(k))
        .for_each(|(orow, arow)| {
            for (p, &av) in arow.iter().enumerate() {
                for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        });
    Tensor::new([m, n], out)
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2("transpose")?;
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new([n, m], out)
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return shape_err(
            "softmax",
            format!("axis {axis} out of range for shape {shape:?}"),
        );
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).fold(T::neg_infinity(), |m, j| m.max(d[idx(j)]));
            let mut sum = T::zero();
            for j in 0..n {
                let e = (d[idx(j)] - max).exp();
                d[idx(j)] = e;
                sum += e;
            }
            for j in 0..n {
                d[idx(j)] /= sum;
            }
        }
    }
    Ok(out)
}

/// `dx = y * (g - sum_axis(g * y))` given the softmax output `y`.
pub fn softmax_backward<T: Real>(
    y: &Tensor<T>,
    grad_out: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    y.expect_same_shape(grad_out, "softmax_backward")?;
    let (outer, n, inner) = split_axis(y.shape(), axis)?;
    let mut dx = Tensor::zeros(y.shape().to_vec());
    let (yd, gd) = (y.data(), grad_out.data());
    let dd = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let dotp: T = (0..n).map(|j| yd[idx(j)] * gd[idx(j)]).sum();
            for j in 0..n {
                dd[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dotp);
            }
        }
    }
    Ok(dx)
}
