//! Selective state-space scan with diagonal state matrix.
//!
//! For every channel `d` and state index `n`, with `z = delta[t,d] * a[d,n]`:
//!
//! ```text
//! a_bar = exp(z)
//! b_bar = (exp(z) - 1) / z * delta[t,d] * b[t,n]      (zero-order hold)
//! h_t   = a_bar * h_{t-1} + b_bar * u[t,d],  h_{-1} = 0
//! y_t   = sum_n c[t,n] * h_t[n] + d_skip[d] * u[t,d]
//! ```
//!
//! The recurrence is evaluated either step by step or as an inclusive scan
//! over `(a, b)` pairs with the associative combine
//! `(a1, b1) . (a2, b2) = (a1 * a2, a2 * b1 + b2)`.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Below this `|delta * a|` the ZOH input gain uses its Taylor expansion.
pub const TAYLOR_THRESHOLD: f64 = 1e-4;

/// Elements per chunk of the parallel scan.
pub const CHUNK: usize = 256;

/// `(exp(z) - 1) / z`, continuous at 0.
#[inline]
pub fn zoh_gain<T: Real>(z: T) -> T {
    zoh_parts(z).1
}

/// `(exp(z), zoh_gain(z), exp(z) - 1)` from a single exponential.
#[inline]
fn zoh_parts<T: Real>(z: T) -> (T, T, T) {
    let em1 = z.exp_m1();
    let gain = if z.abs() < T::lit(TAYLOR_THRESHOLD) {
        T::one() + z * T::lit(0.5) + z * z / T::lit(6.0)
    } else {
        em1 / z
    };
    (em1 + T::one(), gain, em1)
}

/// Derivative of [`zoh_gain`].
#[inline]
pub fn zoh_gain_derivative<T: Real>(z: T) -> T {
    let em1 = z.exp_m1();
    gain_derivative_from(z, em1 + T::one(), em1)
}

#[inline]
fn gain_derivative_from<T: Real>(z: T, a_bar: T, em1: T) -> T {
    if z.abs() < T::lit(1e-2) {
        // sum_k k z^(k-1) / (k+1)!
        T::lit(0.5)
            + z * (T::lit(1.0 / 3.0)
                + z * (T::lit(1.0 / 8.0) + z * (T::lit(1.0 / 30.0) + z * T::lit(1.0 / 144.0))))
    } else {
        (z * a_bar - em1) / (z * z)
    }
}

/// Zero-order-hold discretization of one scalar `(a, b)` pair.
pub fn discretize<T: Real>(a: T, b: T, delta: T) -> Result<(T, T)> {
    if delta.is_nan() || delta <= T::zero() {
        return arg_err("discretize", format!("delta must be positive, got {delta}"));
    }
    let z = delta * a;
    Ok((z.exp(), zoh_gain(z) * delta * b))
}

/// Continuous parameters of one selective scan.
#[derive(Clone, Debug)]
pub struct SsmParams<T = f32> {
    /// `[D, N]`, strictly negative.
    pub a: Tensor<T>,
    /// `[L, N]`
    pub b: Tensor<T>,
    /// `[L, N]`
    pub c: Tensor<T>,
    /// `[D]`
    pub d_skip: Tensor<T>,
    /// `[L, D]`, strictly positive.
    pub delta: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    l: usize,
    d: usize,
    n: usize,
}

impl<T: Real> SsmParams<T> {
    fn validate(&self, u: &Tensor<T>, op: &'static str) -> Result<Dims> {
        let (l, d) = u.dims2(op)?;
        let (_, n) = self.a.dims2(op)?;
        let expect = |name: &str, t: &Tensor<T>, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return shape_err(
                    op,
                    format!("{name} should be {shape:?}, got {:?}", t.shape()),
                );
            }
            Ok(())
        };
        expect("a", &self.a, &[d, n])?;
        expect("b", &self.b, &[l, n])?;
        expect("c", &self.c, &[l, n])?;
        expect("d_skip", &self.d_skip, &[d])?;
        expect("delta", &self.delta, &[l, d])?;
        // Written so that NaN is rejected too.
        let positive = |v: &T| v.partial_cmp(&T::zero()) == Some(Ordering::Greater);
        if let Some(v) = self.delta.data().iter().find(|v| !positive(v)) {
            return arg_err(op, format!("delta must be positive, found {v}"));
        }
        if let Some(v) = self.a.data().iter().find(|v| !positive(&-**v)) {
            return arg_err(op, format!("state matrix must be negative, found {v}"));
        }
        Ok(Dims { l, d, n })
    }
}

/// One cell of the linear recurrence `h -> a * h + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanElement<T> {
    pub a: T,
    pub b: T,
}

impl<T: Real> ScanElement<T> {
    pub fn identity() -> Self {
        Self {
            a: T::one(),
            b: T::zero(),
        }
    }

    /// Applies `self` first, then `next`.
    #[inline]
    pub fn combine(self, next: Self) -> Self {
        Self {
            a: self.a * next.a,
            b: next.a * self.b + next.b,
        }
    }
}

/// In-place Blelloch scan of one chunk; afterwards `xs[i]` is the inclusive
/// prefix `xs[0] . ... . xs[i]`.
fn blelloch_inclusive<T: Real>(xs: &mut [ScanElement<T>], scratch: &mut Vec<ScanElement<T>>) {
    let n = xs.len();
    if n <= 1 {
        return;
    }
    let m = n.next_power_of_two();
    scratch.clear();
    scratch.extend_from_slice(xs);
    scratch.resize(m, ScanElement::identity());
    // up-sweep
    let mut step = 1;
    while step < m {
        for i in (0..m).step_by(2 * step) {
            let (l, r) = (i + step - 1, i + 2 * step - 1);
            scratch[r] = scratch[l].combine(scratch[r]);
        }
        step *= 2;
    }
    // down-sweep to the exclusive prefix
    scratch[m - 1] = ScanElement::identity();
    let mut step = m / 2;
    while step >= 1 {
        for i in (0..m).step_by(2 * step) {
            let (l, r) = (i + step - 1, i + 2 * step - 1);
            let left = scratch[l];
            scratch[l] = scratch[r];
            scratch[r] = scratch[r].combine(left);
        }
        step /= 2;
    }
    for (x, prefix) in xs.iter_mut().zip(scratch.iter()) {
        *x = prefix.combine(*x);
    }
}

/// Inclusive scan in chunks of [`CHUNK`]: each chunk is scanned on its own,
/// then the running carry is folded in chunk by chunk.
pub fn inclusive_scan<T: Real>(xs: &mut [ScanElement<T>]) {
    let mut scratch = Vec::with_capacity(CHUNK);
    let mut carry = ScanElement::identity();
    for chunk in xs.chunks_mut(CHUNK) {
        blelloch_inclusive(chunk, &mut scratch);
        for x in chunk.iter_mut() {
            *x = carry.combine(*x);
        }
        carry = *chunk.last().unwrap();
    }
}

fn finite_or_err<T: Real>(y: Vec<T>, dims: Dims, op: &str) -> Result<Tensor<T>> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: op.into() });
    }
    Tensor::new([dims.l, dims.d], y)
}

/// Scatter per-channel columns `[D][L]` into a `[L, D]` buffer.
fn interleave<T: Real>(cols: Vec<Vec<T>>, dims: Dims) -> Vec<T> {
    let mut y = vec![T::zero(); dims.l * dims.d];
    for (d, col) in cols.into_iter().enumerate() {
        for (t, v) in col.into_iter().enumerate() {
            y[t * dims.d + d] = v;
        }
    }
    y
}

/// Step-by-step recurrence.
pub fn selective_scan_seq<T: Real>(u: &Tensor<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    let dims = p.validate(u, "selective_scan")?;
    let Dims { l, d: dd, n } = dims;
    let (ud, dl, ad, bd, cd) = (u.data(), p.delta.data(), p.a.data(), p.b.data(), p.c.data());
    let cols: Vec<Vec<T>> = (0..dd)
        .into_par_iter()
        .map(|d| {
            let mut h = vec![T::zero(); n];
            let mut col = Vec::with_capacity(l);
            for t in 0..l {
                let delta = dl[t * dd + d];
                let x = ud[t * dd + d];
                let mut y = p.d_skip.data()[d] * x;
                for (k, hk) in h.iter_mut().enumerate() {
                    let (a_bar, gain, _) = zoh_parts(delta * ad[d * n + k]);
                    *hk = a_bar * *hk + gain * delta * bd[t * n + k] * x;
                    y += cd[t * n + k] * *hk;
                }
                col.push(y);
            }
            col
        })
        .collect();
    finite_or_err(interleave(cols, dims), dims, "selective_scan")
}

/// Same contract as [`selective_scan_seq`], evaluated with [`inclusive_scan`]
/// per `(channel, state)` sequence. Channels run in parallel.
pub fn selective_scan_par<T: Real>(u: &Tensor<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    let dims = p.validate(u, "selective_scan")?;
    let Dims { l, d: dd, n } = dims;
    let (ud, dl, ad, bd, cd) = (u.data(), p.delta.data(), p.a.data(), p.b.data(), p.c.data());
    let cols: Vec<Vec<T>> = (0..dd)
        .into_par_iter()
        .map(|d| {
            let mut col: Vec<T> = (0..l)
                .map(|t| p.d_skip.data()[d] * ud[t * dd + d])
                .collect();
            let mut elems = Vec::with_capacity(l);
            for k in 0..n {
                elems.clear();
                elems.extend((0..l).map(|t| {
                    let delta = dl[t * dd + d];
                    let (a_bar, gain, _) = zoh_parts(delta * ad[d * n + k]);
                    ScanElement {
                        a: a_bar,
                        b: gain * delta * bd[t * n + k] * ud[t * dd + d],
                    }
                }));
                inclusive_scan(&mut elems);
                for (t, e) in elems.iter().enumerate() {
                    col[t] += cd[t * n + k] * e.b;
                }
            }
            col
        })
        .collect();
    finite_or_err(interleave(cols, dims), dims, "selective_scan")
}

/// Gradients of a scalar loss with respect to every scan input.
#[derive(Clone, Debug)]
pub struct SsmGrads<T> {
    pub du: Tensor<T>,
    pub ddelta: Tensor<T>,
    pub da: Tensor<T>,
    pub db: Tensor<T>,
    pub dc: Tensor<T>,
    pub dd_skip: Tensor<T>,
}

/// Reverse-time recurrence for the vector-Jacobian product of the scan.
/// Hidden states are recomputed sequentially.
pub fn selective_scan_backward<T: Real>(
    u: &Tensor<T>,
    p: &SsmParams<T>,
    grad_y: &Tensor<T>,
) -> Result<SsmGrads<T>> {
    let dims = p.validate(u, "selective_scan_backward")?;
    u.expect_same_shape(grad_y, "selective_scan_backward")?;
    let Dims { l, d: dd, n } = dims;
    let (ud, dl, ad, bd, cd, gd) = (
        u.data(),
        p.delta.data(),
        p.a.data(),
        p.b.data(),
        p.c.data(),
        grad_y.data(),
    );

    struct Partial<T> {
        du: Vec<T>,
        ddelta: Vec<T>,
        da: Vec<T>,
        db: Vec<T>,
        dc: Vec<T>,
        dskip: T,
    }

    let partials: Vec<Partial<T>> = (0..dd)
        .into_par_iter()
        .map(|d| {
            // states[t * n + k] = h_t[k]; em1s and gains cache the
            // discretization of the same step.
            let mut states = vec![T::zero(); l * n];
            let mut em1s = vec![T::zero(); l * n];
            let mut gains = vec![T::zero(); l * n];
            let mut h = vec![T::zero(); n];
            for t in 0..l {
                let delta = dl[t * dd + d];
                let x = ud[t * dd + d];
                for k in 0..n {
                    let (a_bar, gain, em1) = zoh_parts(delta * ad[d * n + k]);
                    h[k] = a_bar * h[k] + gain * delta * bd[t * n + k] * x;
                    states[t * n + k] = h[k];
                    em1s[t * n + k] = em1;
                    gains[t * n + k] = gain;
                }
            }
            let mut out = Partial {
                du: vec![T::zero(); l],
                ddelta: vec![T::zero(); l],
                da: vec![T::zero(); n],
                db: vec![T::zero(); l * n],
                dc: vec![T::zero(); l * n],
                dskip: T::zero(),
            };
            let mut gh = vec![T::zero(); n];
            let skip = p.d_skip.data()[d];
            for t in (0..l).rev() {
                let g = gd[t * dd + d];
                let x = ud[t * dd + d];
                let delta = dl[t * dd + d];
                out.du[t] = skip * g;
                out.dskip += g * x;
                for k in 0..n {
                    let a = ad[d * n + k];
                    let bk = bd[t * n + k];
                    out.dc[t * n + k] = g * states[t * n + k];
                    gh[k] += g * cd[t * n + k];
                    let h_prev = if t > 0 {
                        states[(t - 1) * n + k]
                    } else {
                        T::zero()
                    };
                    let z = delta * a;
                    let em1 = em1s[t * n + k];
                    let a_bar = em1 + T::one();
                    let gain = gains[t * n + k];
                    let g_abar = gh[k] * h_prev;
                    let g_bbar = gh[k] * x;
                    out.du[t] += gh[k] * gain * delta * bk;
                    let dz =
                        g_abar * a_bar + g_bbar * delta * bk * gain_derivative_from(z, a_bar, em1);
                    out.ddelta[t] += dz * a + g_bbar * gain * bk;
                    out.da[k] += dz * delta;
                    out.db[t * n + k] = g_bbar * gain * delta;
                    gh[k] *= a_bar;
                }
            }
            out
        })
        .collect();

    let mut du = vec![T::zero(); l * dd];
    let mut ddelta = vec![T::zero(); l * dd];
    let mut da = vec![T::zero(); dd * n];
    let mut db = vec![T::zero(); l * n];
    let mut dc = vec![T::zero(); l * n];
    let mut dskip = vec![T::zero(); dd];
    for (d, part) in partials.into_iter().enumerate() {
        for t in 0..l {
            du[t * dd + d] = part.du[t];
            ddelta[t * dd + d] = part.ddelta[t];
        }
        da[d * n..(d + 1) * n].copy_from_slice(&part.da);
        for (acc, v) in db.iter_mut().zip(part.db) {
            *acc += v;
        }
        for (acc, v) in dc.iter_mut().zip(part.dc) {
            *acc += v;
        }
        dskip[d] = part.dskip;
    }
    Ok(SsmGrads {
        du: Tensor::new([l, dd], du)?,
        ddelta: Tensor::new([l, dd], ddelta)?,
        da: Tensor::new([dd, n], da)?,
        db: Tensor::new([l, n], db)?,
        dc: Tensor::new([l, n], dc)?,
        dd_skip: Tensor::new([dd], dskip)?,
    })
}
