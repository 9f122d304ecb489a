//! Binary PPM (P6, maxval 255) images and the byte/float conversions.
//!
//! Encoding is always `P6\n<width> <height>\n255\n` followed by row-major RGB
//! bytes. Decoding also accepts arbitrary whitespace and `#` comments in the
//! header.

use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Image(msg.into()))
}

/// Maps `[0, 1]` to a byte, rounding half up and clamping.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap_or("");
        match text.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bad(format!("bad {what} in PPM header")),
        }
    }
}

impl RgbImage {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(b"P6") {
            return bad("not a binary PPM (missing P6 magic)");
        }
        let mut hdr = Header { bytes, pos: 2 };
        let width = hdr.number("width")?;
        let height = hdr.number("height")?;
        let maxval = hdr.number("maxval")?;
        if maxval != 255 {
            return bad(format!(
                "unsupported maxval {maxval}; only 255 is supported"
            ));
        }
        if !bytes.get(hdr.pos).is_some_and(u8::is_ascii_whitespace) {
            return bad("missing whitespace after PPM header");
        }
        let start = hdr.pos + 1;
        let len = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| Error::Image(format!("{width}x{height} is too large")))?;
        let data = &bytes[start..];
        if data.len() < len {
            return bad(format!(
                "truncated pixel data: expected {len} bytes, found {}",
                data.len()
            ));
        }
        Ok(Self {
            width,
            height,
            pixels: data[..len].to_vec(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    /// `[H, W, 3]` with values `byte / 255`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let scale = T::lit(255.0);
        Tensor::new(
            vec![self.height, self.width, 3],
            self.pixels
                .iter()
                .map(|&b| T::lit(b as f64) / scale)
                .collect(),
        )
        .expect("pixel count matches the header")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (height, width, c) = t.dims3("from_tensor")?;
        if c != 3 {
            return bad(format!("expected 3 channels, got {c}"));
        }
        if !t.is_finite() {
            return bad("cannot quantize non-finite values");
        }
        Ok(Self {
            width,
            height,
            pixels: t.data().iter().map(|v| quantize(v.as_f64())).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(3.0), 255);
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.4999 / 255.0), 0);
        assert_eq!(quantize(127.5 / 255.0), 128);
    }

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P6 # made by hand\n2  1\n# max\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = RgbImage::decode(&bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixels, [1, 2, 3, 4, 5, 6]);
        assert!(img.encode().starts_with(b"P6\n2 1\n255\n"));
    }

    #[test]
    fn malformed_inputs() {
        for bytes in [
            &b"P5\n1 1\n255\n\0"[..],
            b"P6\n1 1\n65535\n\0\0\0\0\0\0",
            b"P6\n2 2\n255\n\0\0\0",
            b"P6\n0 2\n255\n",
            b"P6\nx 2\n255\n",
            b"",
        ] {
            assert!(matches!(RgbImage::decode(bytes), Err(Error::Image(_))));
        }
    }

    #[test]
    fn bundled_samples_decode() {
        let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/samples");
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let bytes = std::fs::read(&path).unwrap();
            let img = RgbImage::decode(&bytes).unwrap();
            assert_eq!(img.encode(), bytes, "{}", path.display());
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let pixels: Vec<u8> = (0..w * h * 3)
                .map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8)
                .collect();
            let img = RgbImage { width: w, height: h, pixels };
            prop_assert_eq!(RgbImage::decode(&img.encode()).unwrap(), img.clone());
            let back = RgbImage::from_tensor(&img.to_tensor::<f32>()).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
