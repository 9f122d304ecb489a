//! Image quality measures and intensity histograms. All arithmetic is f64.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{arg_err, shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    a.expect_same_shape(b, op)?;
    a.dims3(op).map(|_| ())
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`; infinite for
/// identical inputs.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    let mse = sse / a.numel() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// Single-channel view of an `[H, W, C]` image: luma for three channels,
/// the channel itself for one.
pub fn luma<T: Real>(img: &Tensor<T>) -> Result<Vec<f64>> {
    let (_, _, c) = img.dims3("luma")?;
    match c {
        1 => Ok(img.data().iter().map(|v| v.as_f64()).collect()),
        3 => Ok(img
            .data()
            .chunks(3)
            .map(|p| (0..3).map(|k| LUMA[k] * p[k].as_f64()).sum())
            .collect()),
        _ => arg_err("luma", format!("expected 1 or 3 channels, got {c}")),
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable Gaussian filter of an `h x w` plane.
fn blur(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let rows: Vec<f64> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let row = &x[y * w..(y + 1) * w];
            (0..ow).map(move |ox| g.iter().zip(&row[ox..]).map(|(k, v)| k * v).sum::<f64>())
        })
        .collect();
    (0..oh)
        .into_par_iter()
        .flat_map_iter(|oy| {
            let rows = &rows;
            (0..ow).map(move |ox| {
                g.iter()
                    .enumerate()
                    .map(|(k, gk)| gk * rows[(oy + k) * ow + ox])
                    .sum::<f64>()
            })
        })
        .collect()
}

/// Mean structural similarity on luma with an 11x11 Gaussian window
/// (sigma 1.5), dynamic range 1 and valid windows only.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (h, w, _) = a.dims3("ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return shape_err(
            "ssim",
            format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        );
    }
    let (x, y) = (luma(a)?, luma(b)?);
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = blur(&x, h, w, &g);
    let my = blur(&y, h, w, &g);
    let sxx = blur(&prod(&x, &x), h, w, &g);
    let syy = blur(&prod(&y, &y), h, w, &g);
    let sxy = blur(&prod(&x, &y), h, w, &g);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Per-channel intensity counts over `[0, 1]`; bin `k` covers
/// `[k / bins, (k + 1) / bins)` and the last bin also holds 1.0.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub bins: usize,
    /// `counts[channel][bin]`.
    pub counts: Vec<Vec<u64>>,
    /// Pixels per channel.
    pub total: u64,
    /// Values outside `[0, 1]` that were clipped into the end bins.
    pub clipped: u64,
}

pub fn histogram<T: Real>(img: &Tensor<T>, bins: usize) -> Result<Histogram> {
    let (h, w, c) = img.dims3("histogram")?;
    if bins == 0 {
        return arg_err("histogram", "bins must be positive");
    }
    if !img.is_finite() {
        return arg_err("histogram", "image contains non-finite values");
    }
    let mut hist = Histogram {
        bins,
        counts: vec![vec![0; bins]; c],
        total: (h * w) as u64,
        clipped: 0,
    };
    for px in img.data().chunks(c) {
        for (ch, &v) in px.iter().enumerate() {
            let mut v = v.as_f64();
            if !(0.0..=1.0).contains(&v) {
                hist.clipped += 1;
                v = v.clamp(0.0, 1.0);
            }
            let k = ((v * bins as f64) as usize).min(bins - 1);
            hist.counts[ch][k] += 1;
        }
    }
    Ok(hist)
}

impl Histogram {
    /// Counts of one channel divided by the pixel count.
    pub fn normalized(&self, channel: usize) -> Vec<f64> {
        self.counts[channel]
            .iter()
            .map(|&n| n as f64 / self.total as f64)
            .collect()
    }
}

/// L1 distance of normalized histograms averaged over channels, in `[0, 2]`.
pub fn hist_distance(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.bins != b.bins || a.counts.len() != b.counts.len() {
        return shape_err(
            "hist_distance",
            format!(
                "{} channels x {} bins vs {} channels x {} bins",
                a.counts.len(),
                a.bins,
                b.counts.len(),
                b.bins
            ),
        );
    }
    let channels = a.counts.len();
    let sum: f64 = (0..channels)
        .map(|ch| {
            a.normalized(ch)
                .iter()
                .zip(b.normalized(ch))
                .map(|(p, q)| (p - q).abs())
                .sum::<f64>()
        })
        .sum();
    Ok(sum / channels as f64)
}
