//! Single-level orthonormal 2D Haar transform on channels-last tensors.
//!
//! Each non-overlapping 2x2 block `[[p00, p01], [p10, p11]]` maps to
//!
//! ```text
//! cA = (p00 + p01 + p10 + p11) / 2
//! cH = (p00 - p01 + p10 - p11) / 2
//! cV = (p00 + p01 - p10 - p11) / 2
//! cD = (p00 - p01 - p10 + p11) / 2
//! ```
//!
//! The transform is orthogonal, so it preserves energy and its adjoint is
//! its inverse. Subbands are always ordered `(cA, cH, cV, cD)`.

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct WaveletSubbands<T = f32> {
    pub ca: Tensor<T>,
    pub ch: Tensor<T>,
    pub cv: Tensor<T>,
    pub cd: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Low,
    High,
}

/// Sum of squares of each subband.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct BandEnergy {
    pub ca: f64,
    pub ch: f64,
    pub cv: f64,
    pub cd: f64,
}

impl BandEnergy {
    pub fn total(&self) -> f64 {
        self.ca + self.ch + self.cv + self.cd
    }

    pub fn high(&self) -> f64 {
        self.ch + self.cv + self.cd
    }

    /// Share of the energy held by `cA`; 1.0 for an all-zero input.
    pub fn low_fraction(&self) -> f64 {
        let t = self.total();
        if t == 0.0 {
            1.0
        } else {
            self.ca / t
        }
    }
}

impl<T: Real> WaveletSubbands<T> {
    pub fn bands(&self) -> [&Tensor<T>; 4] {
        [&self.ca, &self.ch, &self.cv, &self.cd]
    }

    fn check(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        let dims = self.ca.dims3(op)?;
        for (name, b) in [("cH", &self.ch), ("cV", &self.cv), ("cD", &self.cd)] {
            if b.shape() != self.ca.shape() {
                return shape_err(
                    op,
                    format!("{name} is {:?} but cA is {:?}", b.shape(), self.ca.shape()),
                );
            }
        }
        Ok(dims)
    }

    pub fn energy(&self) -> BandEnergy {
        let e = |t: &Tensor<T>| t.sum_sq().as_f64();
        BandEnergy {
            ca: e(&self.ca),
            ch: e(&self.ch),
            cv: e(&self.cv),
            cd: e(&self.cd),
        }
    }

    /// Packs the subbands along channels as `[cA | cH | cV | cD]`.
    pub fn pack(&self) -> Result<Tensor<T>> {
        self.check("pack")?;
        Tensor::concat_channels(&self.bands())
    }

    /// Inverse of [`pack`](Self::pack).
    pub fn unpack(packed: &Tensor<T>) -> Result<Self> {
        let c4 = packed.channels();
        if !c4.is_multiple_of(4) {
            return shape_err(
                "unpack",
                format!("channel axis {c4} is not a multiple of 4"),
            );
        }
        let c = c4 / 4;
        Ok(Self {
            ca: packed.narrow_channels(0, c)?,
            ch: packed.narrow_channels(c, c)?,
            cv: packed.narrow_channels(2 * c, c)?,
            cd: packed.narrow_channels(3 * c, c)?,
        })
    }
}

pub fn dwt2<T: Real>(x: &Tensor<T>) -> Result<WaveletSubbands<T>> {
    let (h, w, c) = x.dims3("dwt2")?;
    if h % 2 != 0 {
        return Err(Error::OddDimension {
            op: "dwt2",
            axis: "height",
            size: h,
        });
    }
    if w % 2 != 0 {
        return Err(Error::OddDimension {
            op: "dwt2",
            axis: "width",
            size: w,
        });
    }
    let (hh, hw) = (h / 2, w / 2);
    let half = T::lit(0.5);
    let n = hh * hw * c;
    let (mut ca, mut ch, mut cv, mut cd) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let xd = x.data();
    for i in 0..hh {
        for j in 0..hw {
            let r0 = (2 * i * w + 2 * j) * c;
            let r1 = ((2 * i + 1) * w + 2 * j) * c;
            for k in 0..c {
                let (p00, p01) = (xd[r0 + k], xd[r0 + c + k]);
                let (p10, p11) = (xd[r1 + k], xd[r1 + c + k]);
                ca.push((p00 + p01 + p10 + p11) * half);
                ch.push((p00 - p01 + p10 - p11) * half);
                cv.push((p00 + p01 - p10 - p11) * half);
                cd.push((p00 - p01 - p10 + p11) * half);
            }
        }
    }
    let shape = [hh, hw, c];
    Ok(WaveletSubbands {
        ca: Tensor::new(shape, ca)?,
        ch: Tensor::new(shape, ch)?,
        cv: Tensor::new(shape, cv)?,
        cd: Tensor::new(shape, cd)?,
    })
}

pub fn iwt2<T: Real>(s: &WaveletSubbands<T>) -> Result<Tensor<T>> {
    let (hh, hw, c) = s.check("iwt2")?;
    let (h, w) = (2 * hh, 2 * hw);
    let half = T::lit(0.5);
    let mut out = vec![T::zero(); h * w * c];
    let (a, hd, v, d) = (s.ca.data(), s.ch.data(), s.cv.data(), s.cd.data());
    for i in 0..hh {
        for j in 0..hw {
            let src = (i * hw + j) * c;
            let r0 = (2 * i * w + 2 * j) * c;
            let r1 = ((2 * i + 1) * w + 2 * j) * c;
            for k in 0..c {
                let (ca, ch, cv, cd) = (a[src + k], hd[src + k], v[src + k], d[src + k]);
                out[r0 + k] = (ca + ch + cv + cd) * half;
                out[r0 + c + k] = (ca - ch + cv - cd) * half;
                out[r1 + k] = (ca + ch - cv - cd) * half;
                out[r1 + c + k] = (ca - ch - cv + cd) * half;
            }
        }
    }
    Tensor::new([h, w, c], out)
}

/// Exchanges the low (`cA`) or the high (`cH, cV, cD`) subbands of two
/// decompositions and returns both modified quadruples.
pub fn swap_subbands<T: Real>(
    a: &WaveletSubbands<T>,
    b: &WaveletSubbands<T>,
    which: Band,
) -> Result<(WaveletSubbands<T>, WaveletSubbands<T>)> {
    a.check("swap_subbands")?;
    b.check("swap_subbands")?;
    if a.ca.shape() != b.ca.shape() {
        return shape_err(
            "swap_subbands",
            format!("{:?} vs {:?}", a.ca.shape(), b.ca.shape()),
        );
    }
    let (mut a2, mut b2) = (a.clone(), b.clone());
    match which {
        Band::Low => std::mem::swap(&mut a2.ca, &mut b2.ca),
        Band::High => {
            std::mem::swap(&mut a2.ch, &mut b2.ch);
            std::mem::swap(&mut a2.cv, &mut b2.cv);
            std::mem::swap(&mut a2.cd, &mut b2.cd);
        }
    }
    Ok((a2, b2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random<T: Real>(shape: [usize; 3], seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| T::lit(rng.random_range(0.0..1.0)))
    }

    #[test]
    fn constant_has_no_detail() {
        let s = dwt2(&Tensor::<f64>::full([4, 6, 2], 0.3)).unwrap();
        assert!(s.ca.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        for b in [&s.ch, &s.cv, &s.cd] {
            assert!(b.data().iter().all(|&v| v == 0.0));
        }
        let back = iwt2(&s).unwrap();
        assert!(back.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn hand_block() {
        let x = Tensor::<f64>::from_f64([2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = dwt2(&x).unwrap();
        assert_eq!(
            [
                s.ca.data()[0],
                s.ch.data()[0],
                s.cv.data()[0],
                s.cd.data()[0]
            ],
            [5.0, -1.0, -2.0, 0.0]
        );
        assert_eq!(iwt2(&s).unwrap(), x);
    }

    #[test]
    fn parseval_and_roundtrip() {
        let x = random::<f64>([8, 8, 1], 1);
        let s = dwt2(&x).unwrap();
        assert!((s.energy().total() - x.sum_sq()).abs() < 1e-10);
        let x = random::<f64>([64, 64, 3], 2);
        assert!(iwt2(&dwt2(&x).unwrap()).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
        let x = random::<f32>([64, 64, 3], 3);
        let s = dwt2(&x).unwrap();
        assert!(iwt2(&s).unwrap().max_abs_diff(&x).unwrap() < 1e-5);
        let rel = (s.energy().total() - x.sum_sq() as f64).abs() / x.sum_sq() as f64;
        assert!(rel < 1e-4);
    }

    #[test]
    fn odd_sizes_are_rejected_with_hint() {
        let err = dwt2(&Tensor::<f64>::zeros([3, 4, 1])).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
        assert!(dwt2(&Tensor::<f64>::zeros([4, 5, 1])).is_err());
    }

    #[test]
    fn mismatched_subbands_are_rejected() {
        let mut s = dwt2(&random::<f64>([4, 4, 2], 4)).unwrap();
        s.cd = Tensor::zeros([2, 2, 1]);
        assert!(iwt2(&s).is_err());
    }

    #[test]
    fn swaps() {
        let a = dwt2(&random::<f64>([4, 4, 2], 5)).unwrap();
        let b = dwt2(&random::<f64>([4, 4, 2], 6)).unwrap();
        let (a1, b1) = swap_subbands(&a, &b, Band::Low).unwrap();
        let (a2, b2) = swap_subbands(&a1, &b1, Band::Low).unwrap();
        assert_eq!((a2, b2), (a.clone(), b.clone()));

        let (same_a, same_b) = swap_subbands(&a, &a, Band::High).unwrap();
        assert_eq!((&same_a, &same_b), (&a, &a));

        let (ah, bh) = swap_subbands(&a, &b, Band::High).unwrap();
        assert_eq!(ah.ca, a.ca);
        assert_eq!(ah.ch, b.ch);
        assert_eq!(ah.cv, b.cv);
        assert_eq!(ah.cd, b.cd);
        assert_eq!(bh.ca, b.ca);
        assert_eq!(bh.ch, a.ch);
    }

    #[test]
    fn pack_unpack() {
        let s = dwt2(&random::<f64>([6, 4, 3], 7)).unwrap();
        let p = s.pack().unwrap();
        assert_eq!(p.shape(), &[3, 2, 12]);
        assert_eq!(WaveletSubbands::unpack(&p).unwrap(), s);
    }

    proptest! {
        #[test]
        fn perfect_reconstruction(hh in 1usize..=64, hw in 1usize..=64, c in 1usize..=3, seed: u64) {
            let x = random::<f64>([2 * hh, 2 * hw, c], seed);
            let s = dwt2(&x).unwrap();
            prop_assert!(iwt2(&s).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
            prop_assert!((s.energy().total() - x.sum_sq()).abs() < 1e-10 * x.sum_sq().max(1.0));
        }
    }
}
