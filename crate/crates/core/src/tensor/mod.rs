//! Dense row-major arrays. Images and feature maps are channels-last
//! `[H, W, C]`; sequences are `[L, C]`.

mod activation;
mod conv;
mod linalg;
mod norm;

pub use activation::Activation;
pub use conv::{conv2d, conv2d_backward, reflect_index, reflect_pad, ConvGrads, ConvSpec};
pub use linalg::{matmul, softmax, softmax_backward, transpose};
pub use norm::{layer_norm, layer_norm_backward, LayerNormGrads};

use crate::error::{arg_err, shape_err, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return arg_err(
                "tensor",
                format!("dimensions must be positive, got {shape:?}"),
            );
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "tensor",
                format!(
                    "shape {shape:?} holds {n} values but data has {}",
                    data.len()
                ),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "dimensions must be positive, got {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Builds a tensor from `f64` values; handy in tests and oracles.
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing (channel) axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => shape_err(op, format!("expected rank 2, got shape {:?}", self.shape)),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => shape_err(
                op,
                format!("expected [H, W, C], got shape {:?}", self.shape),
            ),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            );
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(
                op,
                format!("left is {:?}, right is {:?}", self.shape, other.shape),
            );
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Multiplies every position by a per-channel factor `s[C]`.
    pub fn mul_channels(&self, s: &Self) -> Result<Self> {
        let c = self.channels();
        if s.shape != [c] {
            return shape_err(
                "mul_channels",
                format!("channel axis is {c} but scale has shape {:?}", s.shape),
            );
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            for (v, &k) in row.iter_mut().zip(&s.data) {
                *v *= k;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.numel() as f64)
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates tensors along the trailing axis; leading axes must agree.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return arg_err("concat_channels", "no inputs");
        };
        let lead = &first.shape[..first.rank() - 1];
        for p in parts {
            if &p.shape[..p.rank() - 1] != lead {
                return shape_err(
                    "concat_channels",
                    format!("leading axes {:?} vs {:?}", lead, &p.shape[..p.rank() - 1]),
                );
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.channels()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Self::new(shape, data)
    }

    /// Channels `start..start + len` of the trailing axis.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        let c = self.channels();
        if len == 0 || start + len > c {
            return shape_err(
                "narrow_channels",
                format!(
                    "range {start}..{} outside channel axis of size {c}",
                    start + len
                ),
            );
        }
        let data = self
            .data
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        Self::new(shape, data)
    }

    /// Top-left `h x w` window of an `[H, W, C]` tensor.
    pub fn crop(&self, h: usize, w: usize) -> Result<Self> {
        let (hh, ww, c) = self.dims3("crop")?;
        if h == 0 || w == 0 || h > hh || w > ww {
            return shape_err("crop", format!("cannot crop {hh}x{ww} to {h}x{w}"));
        }
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            data.extend_from_slice(&self.data[y * ww * c..(y * ww + w) * c]);
        }
        Self::new([h, w, c], data)
    }

    /// Bilinear resampling of an `[H, W, C]` tensor with half-pixel centers
    /// and no anti-aliasing (a 2x reduction averages each 2x2 block).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let (h, w, c) = self.dims3("resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return arg_err("resize_bilinear", "output size must be positive");
        }
        let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, T)> {
            let scale = n_in as f64 / n_out as f64;
            (0..n_out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(n_in - 1);
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, T::lit(src - i0 as f64))
                })
                .collect()
        };
        let ty = taps(h, out_h);
        let tx = taps(w, out_w);
        let mut out = Self::zeros([out_h, out_w, c]);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let o = (oy * out_w + ox) * c;
                for ch in 0..c {
                    let at = |y: usize, x: usize| self.data[(y * w + x) * c + ch];
                    let top = at(y0, x0) * (T::one() - fx) + at(y0, x1) * fx;
                    let bot = at(y1, x0) * (T::one() - fx) + at(y1, x1) * fx;
                    out.data[o + ch] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        Ok(out)
    }

    /// 64-bit FNV-1a over the shape and the bit patterns of the values.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for &d in &self.shape {
            h.write(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            h.write(&v.as_f64().to_bits().to_le_bytes());
        }
        h.0
    }
}

pub(crate) struct Fnv(pub u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f64>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new([2, 0], vec![]).is_err());
        assert_eq!(Tensor::<f64>::new([2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let a = Tensor::<f64>::from_fn([2, 2, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn([2, 2, 1], |i| -(i as f64));
        let ab = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.shape(), &[2, 2, 4]);
        assert_eq!(ab.narrow_channels(0, 3).unwrap(), a);
        assert_eq!(ab.narrow_channels(3, 1).unwrap(), b);
    }

    #[test]
    fn bilinear_halving_is_block_mean() {
        let x = Tensor::<f64>::from_fn([4, 4, 1], |i| (i * i) as f64);
        let y = x.resize_bilinear(2, 2).unwrap();
        let mean = (x.data[0] + x.data[1] + x.data[4] + x.data[5]) / 4.0;
        assert!((y.data[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn crop_keeps_top_left() {
        let x = Tensor::<f64>::from_fn([3, 3, 1], |i| i as f64);
        let y = x.crop(2, 2).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 3.0, 4.0]);
    }
}
