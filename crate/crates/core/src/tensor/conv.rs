use rayon::prelude::*;

use super::Tensor;
use crate::error::{arg_err, shape_err, Result};
use crate::real::Real;

/// Stride-1 "same" convolution with reflect padding.
///
/// Weights are laid out `[C_out, C_in / groups, K, K]`, bias `[C_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn dense(kernel_size: usize) -> Self {
        Self {
            kernel_size,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize) -> Self {
        Self {
            kernel_size: 3,
            groups: channels,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel_size / 2
    }

    pub fn weight_shape(&self, c_in: usize, c_out: usize) -> [usize; 4] {
        [
            c_out,
            c_in / self.groups,
            self.kernel_size,
            self.kernel_size,
        ]
    }
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (`-1 -> 1`, `n -> n - 2`). Works for any offset; `n == 1` maps
/// everything to 0.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-pads an `[H, W, C]` tensor on the bottom and right.
pub fn reflect_pad<T: Real>(x: &Tensor<T>, bottom: usize, right: usize) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3("reflect_pad")?;
    let (ho, wo) = (h + bottom, w + right);
    let mut data = Vec::with_capacity(ho * wo * c);
    for y in 0..ho {
        let sy = reflect_index(y as isize, h);
        for xx in 0..wo {
            let sx = reflect_index(xx as isize, w);
            let base = (sy * w + sx) * c;
            data.extend_from_slice(&x.data()[base..base + c]);
        }
    }
    Tensor::new([ho, wo, c], data)
}

struct Geometry {
    h: usize,
    w: usize,
    c_in: usize,
    c_out: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    pad: usize,
}

fn geometry<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Geometry> {
    let (h, width, c_in) = x.dims3("conv2d")?;
    if spec.kernel_size != 1 && spec.kernel_size != 3 {
        return arg_err(
            "conv2d",
            format!("kernel size must be 1 or 3, got {}", spec.kernel_size),
        );
    }
    if spec.groups == 0 || c_in % spec.groups != 0 {
        return shape_err(
            "conv2d",
            format!(
                "groups {} does not divide input channels {c_in}",
                spec.groups
            ),
        );
    }
    let [c_out, cin_g, kh, kw] = match w.shape()[..] {
        [a, b, c, d] => [a, b, c, d],
        _ => {
            return shape_err(
                "conv2d",
                format!(
                    "weight must be [C_out, C_in/groups, K, K], got {:?}",
                    w.shape()
                ),
            )
        }
    };
    if c_out % spec.groups != 0 {
        return shape_err(
            "conv2d",
            format!(
                "groups {} does not divide output channels {c_out}",
                spec.groups
            ),
        );
    }
    if cin_g != c_in / spec.groups {
        return shape_err(
            "conv2d",
            format!(
                "input-channel axis: weight expects {} per group, input has {c_in} over {} groups",
                cin_g, spec.groups
            ),
        );
    }
    if kh != spec.kernel_size || kw != spec.kernel_size {
        return shape_err(
            "conv2d",
            format!("kernel axes are {kh}x{kw}, spec says {}", spec.kernel_size),
        );
    }
    if b.shape() != [c_out] {
        return shape_err(
            "conv2d",
            format!("bias axis must be [{c_out}], got {:?}", b.shape()),
        );
    }
    Ok(Geometry {
        h,
        w: width,
        c_in,
        c_out,
        cin_g,
        cout_g: c_out / spec.groups,
        k: spec.kernel_size,
        pad: spec.padding(),
    })
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// 2D cross-correlation, output spatial size equal to the input.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry(x, w, b, spec)?;
    let (k, kk) = (g.k, g.k * g.k);
    // [ky][kx][co][ci_local] so each tap is a contiguous dot product.
    let mut wt = vec![T::zero(); w.numel()];
    for co in 0..g.c_out {
        for ci in 0..g.cin_g {
            for t in 0..kk {
                wt[(t * g.c_out + co) * g.cin_g + ci] = w.data()[(co * g.cin_g + ci) * kk + t];
            }
        }
    }
    let cols: Vec<usize> = (0..g.w * k)
        .map(|i| reflect_index((i / k + i % k) as isize - g.pad as isize, g.w))
        .collect();
    let xd = x.data();
    let bd = b.data();
    let mut out = vec![T::zero(); g.h * g.w * g.c_out];
    out.par_chunks_mut(g.w * g.c_out)
        .enumerate()
        .for_each(|(y, row)| {
            for ky in 0..k {
                let sy = reflect_index((y + ky) as isize - g.pad as isize, g.h);
                for xx in 0..g.w {
                    let o = &mut row[xx * g.c_out..(xx + 1) * g.c_out];
                    if ky == 0 {
                        o.copy_from_slice(bd);
                    }
                    for kx in 0..k {
                        let sx = cols[xx * k + kx];
                        let pix = &xd[(sy * g.w + sx) * g.c_in..(sy * g.w + sx + 1) * g.c_in];
                        let t = ky * k + kx;
                        for (co, acc) in o.iter_mut().enumerate() {
                            let g0 = (co / g.cout_g) * g.cin_g;
                            let wrow = &wt[(t * g.c_out + co) * g.cin_g..][..g.cin_g];
                            *acc += dot(&pix[g0..g0 + g.cin_g], wrow);
                        }
                    }
                }
            }
        });
    Tensor::new([g.h, g.w, g.c_out], out)
}

#[derive(Debug)]
pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

/// Vector-Jacobian product of [`conv2d`]. Reflect padding makes the input
/// gradient a scatter; it is gathered in the padded domain first and folded
/// back in a fixed order, so results do not depend on the thread count.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = geometry(x, w, b, spec)?;
    if grad_out.shape() != [g.h, g.w, g.c_out] {
        return shape_err(
            "conv2d_backward",
            format!(
                "gradient is {:?}, output is {:?}",
                grad_out.shape(),
                [g.h, g.w, g.c_out]
            ),
        );
    }
    let (k, kk, pad) = (g.k, g.k * g.k, g.pad);
    let xd = x.data();
    let gd = grad_out.data();
    let npos = g.h * g.w;

    let db = need[2].then(|| {
        let mut acc = vec![T::zero(); g.c_out];
        for row in gd.chunks(g.c_out) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        Tensor::new([g.c_out], acc).unwrap()
    });

    let dw = if need[1] {
        let rows: Vec<usize> = (0..g.h * k)
            .map(|i| reflect_index((i / k + i % k) as isize - pad as isize, g.h))
            .collect();
        let cols: Vec<usize> = (0..g.w * k)
            .map(|i| reflect_index((i / k + i % k) as isize - pad as isize, g.w))
            .collect();
        let mut dw = vec![T::zero(); w.numel()];
        dw.par_chunks_mut(g.cin_g * kk)
            .enumerate()
            .for_each(|(co, chunk)| {
                let g0 = (co / g.cout_g) * g.cin_g;
                for p in 0..npos {
                    let gv = gd[p * g.c_out + co];
                    if gv == T::zero() {
                        continue;
                    }
                    let (y, xx) = (p / g.w, p % g.w);
                    for ky in 0..k {
                        let sy = rows[y * k + ky];
                        for kx in 0..k {
                            let sx = cols[xx * k + kx];
                            let pix = &xd[(sy * g.w + sx) * g.c_in + g0..][..g.cin_g];
                            for (ci, &xv) in pix.iter().enumerate() {
                                chunk[ci * kk + ky * k + kx] += gv * xv;
                            }
                        }
                    }
                }
            });
        Some(Tensor::new(w.shape().to_vec(), dw)?)
    } else {
        None
    };

    let dx = if need[0] {
        // [ky][kx][ci][co_local]
        let mut wt = vec![T::zero(); kk * g.c_in * g.cout_g];
        for co in 0..g.c_out {
            let grp = co / g.cout_g;
            let col = co % g.cout_g;
            for cil in 0..g.cin_g {
                let ci = grp * g.cin_g + cil;
                for t in 0..kk {
                    wt[(t * g.c_in + ci) * g.cout_g + col] =
                        w.data()[(co * g.cin_g + cil) * kk + t];
                }
            }
        }
        let (hp, wp) = (g.h + 2 * pad, g.w + 2 * pad);
        let mut padded = vec![T::zero(); hp * wp * g.c_in];
        padded
            .par_chunks_mut(wp * g.c_in)
            .enumerate()
            .for_each(|(py, row)| {
                for ky in 0..k {
                    let Some(y) = py.checked_sub(ky).filter(|&y| y < g.h) else {
                        continue;
                    };
                    for px in 0..wp {
                        let acc = &mut row[px * g.c_in..(px + 1) * g.c_in];
                        for kx in 0..k {
                            let Some(xx) = px.checked_sub(kx).filter(|&v| v < g.w) else {
                                continue;
                            };
                            let grow = &gd[(y * g.w + xx) * g.c_out..][..g.c_out];
                            let t = ky * k + kx;
                            for (ci, a) in acc.iter_mut().enumerate() {
                                let grp = ci / g.cin_g;
                                let wrow = &wt[(t * g.c_in + ci) * g.cout_g..][..g.cout_g];
                                *a += dot(&grow[grp * g.cout_g..(grp + 1) * g.cout_g], wrow);
                            }
                        }
                    }
                }
            });
        let dx = if pad == 0 {
            padded
        } else {
            let mut dx = vec![T::zero(); npos * g.c_in];
            for py in 0..hp {
                let sy = reflect_index(py as isize - pad as isize, g.h);
                for px in 0..wp {
                    let sx = reflect_index(px as isize - pad as isize, g.w);
                    let src = &padded[(py * wp + px) * g.c_in..][..g.c_in];
                    let dst = &mut dx[(sy * g.w + sx) * g.c_in..][..g.c_in];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            dx
        };
        Some(Tensor::new(x.shape().to_vec(), dx)?)
    } else {
        None
    };

    Ok(ConvGrads { dx, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop correlation with explicit reflect padding.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
        let (h, wd, cin) = x.dims3("t").unwrap();
        let cout = w.shape()[0];
        let k = spec.kernel_size;
        let p = spec.padding() as isize;
        let cin_g = cin / spec.groups;
        let cout_g = cout / spec.groups;
        let mut out = Tensor::zeros([h, wd, cout]);
        for y in 0..h {
            for xx in 0..wd {
                for co in 0..cout {
                    let grp = co / cout_g;
                    let mut acc = b.data()[co];
                    for cil in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = reflect_index(y as isize + ky as isize - p, h);
                                let sx = reflect_index(xx as isize + kx as isize - p, wd);
                                let xv = x.data()[(sy * wd + sx) * cin + grp * cin_g + cil];
                                let wv = w.data()[((co * cin_g + cil) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[(y * wd + xx) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(-2, 4), 2);
        assert_eq!(reflect_index(7, 4), 1);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    #[test]
    fn identity_1x1_is_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[5, 3, 4], &mut rng);
        let w = Tensor::from_fn([4, 4, 1, 1], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, &Tensor::zeros([4]), ConvSpec::dense(1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_box_filter_keeps_constant() {
        let x = Tensor::<f64>::full([6, 5, 3], 0.7);
        let w = Tensor::full([3, 1, 3, 3], 1.0 / 9.0);
        let y = conv2d(&x, &w, &Tensor::zeros([3]), ConvSpec::depthwise(3)).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[4, 4, 2], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let spec = ConvSpec::dense(3);
        let got = conv2d(&x, &w, &b, spec).unwrap();
        assert!(got.max_abs_diff(&naive(&x, &w, &b, spec)).unwrap() < 1e-12);
    }

    #[test]
    fn depthwise_matches_per_channel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (h, w, c) in [(8, 8, 4), (3, 7, 2), (1, 5, 3), (2, 2, 1)] {
            let x = random(&[h, w, c], &mut rng);
            let k = random(&[c, 1, 3, 3], &mut rng);
            let b = random(&[c], &mut rng);
            let spec = ConvSpec::depthwise(c);
            let got = conv2d(&x, &k, &b, spec).unwrap();
            assert!(got.max_abs_diff(&naive(&x, &k, &b, spec)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn grouped_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[5, 4, 4], &mut rng);
        let w = random(&[6, 2, 3, 3], &mut rng);
        let b = random(&[6], &mut rng);
        let spec = ConvSpec {
            kernel_size: 3,
            groups: 2,
        };
        let got = conv2d(&x, &w, &b, spec).unwrap();
        assert!(got.max_abs_diff(&naive(&x, &w, &b, spec)).unwrap() < 1e-12);
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let x = Tensor::<f64>::zeros([4, 4, 3]);
        let w = Tensor::zeros([2, 2, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros([2]), ConvSpec::dense(3)).unwrap_err();
        assert!(err.to_string().contains("input-channel"), "{err}");
        let w = Tensor::zeros([2, 3, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros([3]), ConvSpec::dense(3)).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> is bilinear in (x, w); check <dx, x> + <db, 1>-free form.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for spec in [
            ConvSpec::dense(3),
            ConvSpec::dense(1),
            ConvSpec::depthwise(3),
        ] {
            let x = random(&[5, 3, 3], &mut rng);
            let cout = 3;
            let w = random(&spec.weight_shape(3, cout), &mut rng);
            let zero_b = Tensor::zeros([cout]);
            let g = random(&[5, 3, cout], &mut rng);
            let y = conv2d(&x, &w, &zero_b, spec).unwrap();
            let lhs = y.mul(&g).unwrap().sum();
            let grads = conv2d_backward(&x, &w, &zero_b, &g, spec, [true, true, true]).unwrap();
            let via_x = grads.dx.unwrap().mul(&x).unwrap().sum();
            let via_w = grads.dw.unwrap().mul(&w).unwrap().sum();
            assert!((lhs - via_x).abs() < 1e-10, "{lhs} vs {via_x}");
            assert!((lhs - via_w).abs() < 1e-10, "{lhs} vs {via_w}");
        }
    }
}
