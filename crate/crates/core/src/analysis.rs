//! Wavelet statistics of one image or of a low-light/normal-light pair.
//!
//! For a pair `(a, b)` the report also holds the histogram distances between
//! each image and its reconstruction after exchanging subbands with the
//! other: `high_swap` keeps the image's own `cA` and takes the other's
//! details, `low_swap` keeps the details and takes the other's `cA`.

use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::metrics::{hist_distance, histogram, Histogram};
use crate::real::Real;
use crate::tensor::{reflect_pad, Tensor};
use crate::wavelet::{dwt2, iwt2, swap_subbands, Band, WaveletSubbands};

pub const HIST_BINS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    pub ca: f64,
    pub ch: f64,
    pub cv: f64,
    pub cd: f64,
    pub total: f64,
    pub high: f64,
    pub ca_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageReport {
    pub width: usize,
    pub height: usize,
    /// An odd dimension was reflect-padded by one before the transform.
    pub padded: bool,
    pub energy: EnergyReport,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SwapReport {
    pub a_high_swap: f64,
    pub a_low_swap: f64,
    pub b_high_swap: f64,
    pub b_low_swap: f64,
    /// `a_high_swap < a_low_swap`: the details of `b` move the histogram of
    /// `a` less than its approximation band does.
    pub high_swap_closer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub a: ImageReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<ImageReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub swap: Option<SwapReport>,
}

struct Prepared {
    image: Tensor<f64>,
    bands: WaveletSubbands<f64>,
    report: ImageReport,
}

fn prepare<T: Real>(img: &Tensor<T>) -> Result<Prepared> {
    let (height, width, _) = img.dims3("analyze")?;
    let image = reflect_pad(&img.cast::<f64>(), height % 2, width % 2)?;
    let bands = dwt2(&image)?;
    let e = bands.energy();
    let report = ImageReport {
        width,
        height,
        padded: height % 2 == 1 || width % 2 == 1,
        energy: EnergyReport {
            ca: e.ca,
            ch: e.ch,
            cv: e.cv,
            cd: e.cd,
            total: e.total(),
            high: e.high(),
            ca_fraction: e.low_fraction(),
        },
        histogram: histogram(img, HIST_BINS)?,
    };
    Ok(Prepared {
        image,
        bands,
        report,
    })
}

fn swap_report(a: &Prepared, b: &Prepared) -> Result<SwapReport> {
    if a.image.shape() != b.image.shape() {
        return shape_err(
            "analyze",
            format!("{:?} vs {:?}", a.image.shape(), b.image.shape()),
        );
    }
    let hist = |t: &Tensor<f64>| histogram(t, HIST_BINS);
    let (ha, hb) = (hist(&a.image)?, hist(&b.image)?);
    // Swapping highs gives (cA_a, H_b) and (cA_b, H_a); swapping lows gives
    // the same two reconstructions with the roles exchanged.
    let (a_hb, b_ha) = swap_subbands(&a.bands, &b.bands, Band::High)?;
    let a_hb: Histogram = hist(&iwt2(&a_hb)?)?;
    let b_ha: Histogram = hist(&iwt2(&b_ha)?)?;
    let r = SwapReport {
        a_high_swap: hist_distance(&ha, &a_hb)?,
        a_low_swap: hist_distance(&ha, &b_ha)?,
        b_high_swap: hist_distance(&hb, &b_ha)?,
        b_low_swap: hist_distance(&hb, &a_hb)?,
        high_swap_closer: false,
    };
    Ok(SwapReport {
        high_swap_closer: r.a_high_swap < r.a_low_swap,
        ..r
    })
}

/// Statistics of `a`, plus `b` and the swap distances when `b` is given.
pub fn analyze<T: Real>(a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Report> {
    let pa = prepare(a)?;
    let Some(b) = b else {
        return Ok(Report {
            a: pa.report,
            b: None,
            swap: None,
        });
    };
    let pb = prepare(b)?;
    let swap = swap_report(&pa, &pb)?;
    Ok(Report {
        a: pa.report,
        b: Some(pb.report),
        swap: Some(swap),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::RgbImage;

    fn sample(name: &str) -> Tensor<f64> {
        let path = format!("{}/assets/samples/{name}.ppm", env!("CARGO_MANIFEST_DIR"));
        RgbImage::read(path).unwrap().to_tensor()
    }

    #[test]
    fn constant_image_is_all_approximation() {
        let r = analyze(&Tensor::<f64>::full([6, 8, 3], 0.4), None).unwrap();
        assert_eq!(r.a.energy.ca_fraction, 1.0);
        assert_eq!(r.a.energy.high, 0.0);
        assert!(r.b.is_none() && r.swap.is_none());
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("swap").is_none());
    }

    #[test]
    fn odd_sizes_are_padded() {
        let img = Tensor::<f64>::from_fn([5, 7, 3], |i| (i % 11) as f64 / 11.0);
        let r = analyze(&img, None).unwrap();
        assert!(r.a.padded);
        assert_eq!((r.a.width, r.a.height), (7, 5));
        assert_eq!(r.a.histogram.total, 35);
    }

    #[test]
    fn swapping_with_itself_changes_nothing() {
        let img = sample("coffee_low");
        let s = analyze(&img, Some(&img)).unwrap().swap.unwrap();
        assert!(s.a_high_swap.abs() < 1e-12 && s.a_low_swap.abs() < 1e-12);
        assert!(!s.high_swap_closer);
    }

    #[test]
    fn mismatched_pair_is_an_error() {
        let a = Tensor::<f64>::zeros([4, 4, 3]);
        let b = Tensor::<f64>::zeros([4, 6, 3]);
        assert!(analyze(&a, Some(&b)).is_err());
    }

    #[test]
    fn bundled_pairs_follow_both_observations() {
        for name in ["astronaut", "coffee", "chelsea", "rocket"] {
            let low = sample(&format!("{name}_low"));
            let normal = sample(&format!("{name}_normal"));
            let r = analyze(&low, Some(&normal)).unwrap();
            for img in [&r.a, r.b.as_ref().unwrap()] {
                assert!(img.energy.ca > img.energy.high, "{name}");
            }
            let s = r.swap.unwrap();
            assert!(s.high_swap_closer, "{name}: {s:?}");
        }
    }
}
