//! Differentiable operations on [`Var`].

use super::Var;
use crate::error::{arg_err, shape_err, Result};
use crate::real::Real;
use crate::ssm::{selective_scan_backward, selective_scan_par, SsmParams};
use crate::tensor::{
    conv2d, conv2d_backward, layer_norm, layer_norm_backward, matmul, softmax, softmax_backward,
    transpose, Activation, ConvSpec, Tensor,
};
use crate::wavelet::{dwt2, iwt2, WaveletSubbands};

fn need<T: Real>(ps: &[Var<T>], i: usize) -> bool {
    ps[i].requires_grad()
}

fn row_len<T: Real>(t: &Tensor<T>) -> usize {
    t.numel() / t.shape()[0]
}

/// Places `part` at rows `start..` of a zero tensor shaped `shape`.
fn embed_rows<T: Real>(part: &Tensor<T>, start: usize, shape: &[usize]) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(shape.to_vec());
    let rl = row_len(&out);
    out.data_mut()[start * rl..start * rl + part.numel()].copy_from_slice(part.data());
    Ok(out)
}

/// Places `part` at channels `start..` of a zero tensor shaped `shape`.
fn embed_channels<T: Real>(part: &Tensor<T>, start: usize, shape: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(shape.to_vec());
    let (c, pc) = (out.channels(), part.channels());
    for (orow, prow) in out.data_mut().chunks_mut(c).zip(part.data().chunks(pc)) {
        orow[start..start + pc].copy_from_slice(prow);
    }
    out
}

impl<T: Real> Var<T> {
    pub fn add(&self, o: &Self) -> Result<Self> {
        let v = self.value().add(o.value())?;
        Var::record("add", v, vec![self.clone(), o.clone()], |g, _, _| {
            Ok(vec![Some(g.clone()), Some(g.clone())])
        })
    }

    pub fn sub(&self, o: &Self) -> Result<Self> {
        let v = self.value().sub(o.value())?;
        Var::record("sub", v, vec![self.clone(), o.clone()], |g, _, _| {
            Ok(vec![Some(g.clone()), Some(g.scale(-T::one()))])
        })
    }

    /// Elementwise product.
    pub fn mul(&self, o: &Self) -> Result<Self> {
        let v = self.value().mul(o.value())?;
        Var::record("mul", v, vec![self.clone(), o.clone()], |g, ps, _| {
            Ok(vec![
                need(ps, 0).then(|| g.mul(ps[1].value())).transpose()?,
                need(ps, 1).then(|| g.mul(ps[0].value())).transpose()?,
            ])
        })
    }

    pub fn scale(&self, k: f64) -> Result<Self> {
        let k = T::lit(k);
        Var::record(
            "scale",
            self.value().scale(k),
            vec![self.clone()],
            move |g, _, _| Ok(vec![Some(g.scale(k))]),
        )
    }

    /// Multiplies every position by the per-channel factors `s[C]`.
    pub fn mul_channels(&self, s: &Self) -> Result<Self> {
        let v = self.value().mul_channels(s.value())?;
        Var::record(
            "mul_channels",
            v,
            vec![self.clone(), s.clone()],
            |g, ps, _| {
                let (x, s) = (ps[0].value(), ps[1].value());
                let ds = need(ps, 1).then(|| {
                    let c = x.channels();
                    let mut acc = vec![T::zero(); c];
                    for (xr, gr) in x.data().chunks(c).zip(g.data().chunks(c)) {
                        for ((a, &xv), &gv) in acc.iter_mut().zip(xr).zip(gr) {
                            *a += xv * gv;
                        }
                    }
                    Tensor::new([c], acc)
                });
                Ok(vec![
                    need(ps, 0).then(|| g.mul_channels(s)).transpose()?,
                    ds.transpose()?,
                ])
            },
        )
    }

    pub fn conv2d(&self, w: &Self, b: &Self, spec: ConvSpec) -> Result<Self> {
        let v = conv2d(self.value(), w.value(), b.value(), spec)?;
        Var::record(
            "conv2d",
            v,
            vec![self.clone(), w.clone(), b.clone()],
            move |g, ps, _| {
                let r = conv2d_backward(
                    ps[0].value(),
                    ps[1].value(),
                    ps[2].value(),
                    g,
                    spec,
                    [need(ps, 0), need(ps, 1), need(ps, 2)],
                )?;
                Ok(vec![r.dx, r.dw, r.db])
            },
        )
    }

    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: f64) -> Result<Self> {
        let eps = T::lit(eps);
        let v = layer_norm(self.value(), gamma.value(), beta.value(), eps)?;
        Var::record(
            "layer_norm",
            v,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, ps, _| {
                let r = layer_norm_backward(ps[0].value(), ps[1].value(), ps[2].value(), eps, g)?;
                Ok(vec![Some(r.dx), Some(r.dgamma), Some(r.dbeta)])
            },
        )
    }

    pub fn act(&self, kind: Activation) -> Result<Self> {
        Var::record(
            kind.name(),
            kind.apply(self.value()),
            vec![self.clone()],
            move |g, ps, _| {
                Ok(vec![Some(g.zip_map(ps[0].value(), "act", |g, x| {
                    g * kind.derivative(x)
                })?)])
            },
        )
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let v = softmax(self.value(), axis)?;
        Var::record("softmax", v, vec![self.clone()], move |g, _, y| {
            Ok(vec![Some(softmax_backward(y, g, axis)?)])
        })
    }

    pub fn matmul(&self, b: &Self) -> Result<Self> {
        let v = matmul(self.value(), b.value())?;
        Var::record("matmul", v, vec![self.clone(), b.clone()], |g, ps, _| {
            let (a, b) = (ps[0].value(), ps[1].value());
            Ok(vec![
                need(ps, 0).then(|| matmul(g, &transpose(b)?)).transpose()?,
                need(ps, 1).then(|| matmul(&transpose(a)?, g)).transpose()?,
            ])
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let v = transpose(self.value())?;
        Var::record("transpose", v, vec![self.clone()], |g, _, _| {
            Ok(vec![Some(transpose(g)?)])
        })
    }

    /// Haar analysis with the subbands packed as `[cA | cH | cV | cD]`.
    pub fn dwt2(&self) -> Result<Self> {
        let v = dwt2(self.value())?.pack()?;
        Var::record("dwt2", v, vec![self.clone()], |g, _, _| {
            Ok(vec![Some(iwt2(&WaveletSubbands::unpack(g)?)?)])
        })
    }

    /// Haar synthesis from packed subbands.
    pub fn iwt2(&self) -> Result<Self> {
        let v = iwt2(&WaveletSubbands::unpack(self.value())?)?;
        Var::record("iwt2", v, vec![self.clone()], |g, _, _| {
            Ok(vec![Some(dwt2(g)?.pack()?)])
        })
    }

    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        let v = self.value().narrow_channels(start, len)?;
        Var::record("narrow_channels", v, vec![self.clone()], move |g, ps, _| {
            Ok(vec![Some(embed_channels(g, start, ps[0].shape()))])
        })
    }

    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let v = Tensor::concat_channels(&values)?;
        let parents: Vec<Self> = parts.iter().map(|&p| p.clone()).collect();
        Var::record("concat_channels", v, parents, |g, ps, _| {
            let mut start = 0;
            ps.iter()
                .map(|p| {
                    let c = p.value().channels();
                    let part = p.requires_grad().then(|| g.narrow_channels(start, c));
                    start += c;
                    part.transpose()
                })
                .collect()
        })
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Self> {
        let x = self.value();
        let n = x.shape()[0];
        if len == 0 || start + len > n {
            return shape_err(
                "narrow_rows",
                format!("rows {start}..{} out of range for {n}", start + len),
            );
        }
        let rl = row_len(x);
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        let v = Tensor::new(shape, x.data()[start * rl..(start + len) * rl].to_vec())?;
        Var::record("narrow_rows", v, vec![self.clone()], move |g, ps, _| {
            Ok(vec![Some(embed_rows(g, start, ps[0].shape())?)])
        })
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return arg_err("concat_rows", "nothing to concatenate");
        };
        let tail = &first.shape()[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape()[1..] != tail {
                return shape_err(
                    "concat_rows",
                    format!("{:?} vs {:?}", p.shape(), first.shape()),
                );
            }
            rows += p.shape()[0];
            data.extend_from_slice(p.value().data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let v = Tensor::new(shape, data)?;
        let parents: Vec<Self> = parts.iter().map(|&p| p.clone()).collect();
        Var::record("concat_rows", v, parents, |g, ps, _| {
            let mut offset = 0;
            ps.iter()
                .map(|p| {
                    let n = p.value().numel();
                    let part = p.requires_grad().then(|| {
                        Tensor::new(p.shape().to_vec(), g.data()[offset..offset + n].to_vec())
                    });
                    offset += n;
                    part.transpose()
                })
                .collect()
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let v = self.value().clone().reshape(shape.to_vec())?;
        Var::record("reshape", v, vec![self.clone()], |g, ps, _| {
            Ok(vec![Some(g.clone().reshape(ps[0].shape().to_vec())?)])
        })
    }

    /// Treats the input as rows of its last axis; output row `i` is input
    /// row `index[i]`, laid out with shape `out_shape`.
    pub fn gather_rows(&self, index: Vec<usize>, out_shape: &[usize]) -> Result<Self> {
        let x = self.value();
        let c = x.channels();
        let rows = x.numel() / c;
        if out_shape.last() != Some(&c) || out_shape.iter().product::<usize>() != index.len() * c {
            return shape_err(
                "gather_rows",
                format!("{} rows of {c} cannot fill {out_shape:?}", index.len()),
            );
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return arg_err("gather_rows", format!("row {bad} out of range for {rows}"));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        let v = Tensor::new(out_shape.to_vec(), data)?;
        Var::record("gather_rows", v, vec![self.clone()], move |g, ps, _| {
            let mut dx = Tensor::zeros(ps[0].shape().to_vec());
            let d = dx.data_mut();
            for (o, &i) in index.iter().enumerate() {
                for k in 0..c {
                    d[i * c + k] += g.data()[o * c + k];
                }
            }
            Ok(vec![Some(dx)])
        })
    }

    /// Output channel `i` is input channel `index[i]` at every position.
    /// The index list is a constant of the graph.
    pub fn gather_channels(&self, index: Vec<usize>) -> Result<Self> {
        let x = self.value();
        let c = x.channels();
        if index.is_empty() {
            return arg_err("gather_channels", "empty index");
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return arg_err(
                "gather_channels",
                format!("channel {bad} out of range for {c}"),
            );
        }
        let k = index.len();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = k;
        let mut data = Vec::with_capacity(x.numel() / c * k);
        for row in x.data().chunks(c) {
            data.extend(index.iter().map(|&i| row[i]));
        }
        let v = Tensor::new(shape, data)?;
        Var::record("gather_channels", v, vec![self.clone()], move |g, ps, _| {
            let mut dx = Tensor::zeros(ps[0].shape().to_vec());
            for (drow, grow) in dx.data_mut().chunks_mut(c).zip(g.data().chunks(k)) {
                for (&i, &gv) in index.iter().zip(grow) {
                    drow[i] += gv;
                }
            }
            Ok(vec![Some(dx)])
        })
    }

    /// Average over every position, giving a `[C]` vector.
    pub fn channel_mean(&self) -> Result<Self> {
        let x = self.value();
        let c = x.channels();
        let n = x.numel() / c;
        let inv = T::one() / T::lit(n as f64);
        let mut acc = vec![T::zero(); c];
        for row in x.data().chunks(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let v = Tensor::new([c], acc.into_iter().map(|a| a * inv).collect())?;
        Var::record("channel_mean", v, vec![self.clone()], move |g, ps, _| {
            let mut dx = Tensor::zeros(ps[0].shape().to_vec());
            for row in dx.data_mut().chunks_mut(c) {
                for (d, &gv) in row.iter_mut().zip(g.data()) {
                    *d = gv * inv;
                }
            }
            Ok(vec![Some(dx)])
        })
    }

    /// Scales each row of an `[M, N]` matrix to unit L2 norm; norms below
    /// `eps` are clamped to `eps`.
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Self> {
        let (m, n) = self.value().dims2("l2_normalize_rows")?;
        let eps = T::lit(eps);
        let norms: Vec<T> = self
            .value()
            .data()
            .chunks(n)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let mut v = self.value().clone();
        for (row, &nr) in v.data_mut().chunks_mut(n).zip(&norms) {
            let d = nr.max(eps);
            row.iter_mut().for_each(|x| *x /= d);
        }
        Var::record(
            "l2_normalize_rows",
            v,
            vec![self.clone()],
            move |g, _, y| {
                let mut dx = Tensor::zeros([m, n]);
                for (i, drow) in dx.data_mut().chunks_mut(n).enumerate() {
                    let (yr, gr) = (&y.data()[i * n..][..n], &g.data()[i * n..][..n]);
                    if norms[i] > eps {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in drow.iter_mut().zip(yr).zip(gr) {
                            *d = (gv - yv * dot) / norms[i];
                        }
                    } else {
                        for (d, &gv) in drow.iter_mut().zip(gr) {
                            *d = gv / eps;
                        }
                    }
                }
                Ok(vec![Some(dx)])
            },
        )
    }

    /// Divides every element by the single value held in `alpha`.
    pub fn div_by(&self, alpha: &Self) -> Result<Self> {
        if alpha.value().numel() != 1 {
            return shape_err(
                "div_by",
                format!("divisor must hold one value, got {:?}", alpha.shape()),
            );
        }
        let a = alpha.value().data()[0];
        let v = self.value().scale(T::one() / a);
        Var::record(
            "div_by",
            v,
            vec![self.clone(), alpha.clone()],
            move |g, ps, y| {
                let da = need(ps, 1).then(|| {
                    let s: T = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * yv)
                        .sum();
                    Tensor::new(ps[1].shape().to_vec(), vec![-s / a])
                });
                Ok(vec![Some(g.scale(T::one() / a)), da.transpose()?])
            },
        )
    }

    /// `-exp(x)`, the map from a log-magnitude to a negative rate.
    pub fn neg_exp(&self) -> Result<Self> {
        let v = self.value().map(|x| -x.exp());
        Var::record("neg_exp", v, vec![self.clone()], |g, _, y| {
            Ok(vec![Some(g.mul(y)?)])
        })
    }

    /// Top-left `h x w` window of an `[H, W, C]` value.
    pub fn crop(&self, h: usize, w: usize) -> Result<Self> {
        let v = self.value().crop(h, w)?;
        Var::record("crop", v, vec![self.clone()], move |g, ps, _| {
            let (_, ww, c) = ps[0].value().dims3("crop")?;
            let mut dx = Tensor::zeros(ps[0].shape().to_vec());
            for y in 0..h {
                dx.data_mut()[y * ww * c..(y * ww + w) * c]
                    .copy_from_slice(&g.data()[y * w * c..(y + 1) * w * c]);
            }
            Ok(vec![Some(dx)])
        })
    }

    pub fn sum(&self) -> Result<Self> {
        let v = Tensor::scalar(self.value().sum());
        Var::record("sum", v, vec![self.clone()], |g, ps, _| {
            Ok(vec![Some(Tensor::full(
                ps[0].shape().to_vec(),
                g.data()[0],
            ))])
        })
    }

    pub fn mean(&self) -> Result<Self> {
        let v = Tensor::scalar(self.value().mean());
        Var::record("mean", v, vec![self.clone()], |g, ps, _| {
            let n = T::lit(ps[0].value().numel() as f64);
            Ok(vec![Some(Tensor::full(
                ps[0].shape().to_vec(),
                g.data()[0] / n,
            ))])
        })
    }

    /// `sum(x * weights)` for a constant `weights`.
    pub fn dot_const(&self, weights: &Tensor<T>) -> Result<Self> {
        let prod = self.value().mul(weights)?;
        let weights = weights.clone();
        Var::record(
            "dot_const",
            Tensor::scalar(prod.sum()),
            vec![self.clone()],
            move |g, _, _| Ok(vec![Some(weights.scale(g.data()[0]))]),
        )
    }

    /// Mean absolute error against a constant target; the subgradient at a
    /// zero residual is 0.
    pub fn l1_loss(&self, target: &Tensor<T>) -> Result<Self> {
        let diff = self.value().sub(target)?;
        let v = Tensor::scalar(diff.map(|d| d.abs()).mean());
        let n = T::lit(diff.numel() as f64);
        Var::record("l1_loss", v, vec![self.clone()], move |g, _, _| {
            let k = g.data()[0] / n;
            Ok(vec![Some(diff.map(|d| {
                if d > T::zero() {
                    k
                } else if d < T::zero() {
                    -k
                } else {
                    T::zero()
                }
            }))])
        })
    }
}

/// Differentiable [`selective_scan_par`]; the backward pass is the
/// sequential reverse-time recurrence.
pub fn selective_scan<T: Real>(
    u: &Var<T>,
    delta: &Var<T>,
    a: &Var<T>,
    b: &Var<T>,
    c: &Var<T>,
    d_skip: &Var<T>,
) -> Result<Var<T>> {
    let params = |ps: &[Var<T>]| SsmParams {
        a: ps[2].value().clone(),
        b: ps[3].value().clone(),
        c: ps[4].value().clone(),
        d_skip: ps[5].value().clone(),
        delta: ps[1].value().clone(),
    };
    let parents = vec![
        u.clone(),
        delta.clone(),
        a.clone(),
        b.clone(),
        c.clone(),
        d_skip.clone(),
    ];
    let v = selective_scan_par(u.value(), &params(&parents))?;
    Var::record("selective_scan", v, parents, move |g, ps, _| {
        let r = selective_scan_backward(ps[0].value(), &params(ps), g)?;
        Ok(vec![
            Some(r.du),
            Some(r.ddelta),
            Some(r.da),
            Some(r.db),
            Some(r.dc),
            Some(r.dd_skip),
        ])
    })
}
