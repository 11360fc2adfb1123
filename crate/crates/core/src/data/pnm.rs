//! Binary Netpbm images: P5 (gray) and P6 (RGB), 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Interleaved 8-bit raster with one or three channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u8,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("image extent {width}x{height} is empty")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("{channels} channels, expected 1 or 3")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::ShapeMismatch {
                op: "image pixels",
                expected: (width * height * channels).to_string(),
                actual: pixels.len().to_string(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            maxval: 255,
            pixels,
        })
    }

    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, pixels)
    }

    pub fn rgb(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 3, pixels)
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Header { bytes, pos: 0 };
        let magic = cursor.token()?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::format("netpbm", format!("unsupported magic {other:?}"))),
        };
        let width = cursor.number("width")?;
        let height = cursor.number("height")?;
        let maxval = cursor.number("maxval")?;
        if !(1..=255).contains(&maxval) {
            return Err(Error::format("netpbm", format!("maxval {maxval} is not 8-bit")));
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(cursor.pos) {
            Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
            _ => return Err(Error::format("netpbm", "missing raster separator")),
        }
        let raster = &bytes[cursor.pos..];
        let expected = width * height * channels;
        if raster.len() != expected {
            return Err(Error::format(
                "netpbm",
                format!("raster has {} bytes, expected {expected}", raster.len()),
            ));
        }
        let mut image = Self::new(width, height, channels, raster.to_vec())
            .map_err(|e| Error::format("netpbm", e.to_string()))?;
        image.maxval = maxval as u8;
        Ok(image)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format { format, reason } => Error::Format {
                format,
                reason: format!("{}: {reason}", path.display()),
            },
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// `(1, channels, h, w)` tensor with samples mapped to `v / maxval - 0.5`.
    pub fn to_tensor(&self) -> Tensor {
        let max = self.maxval as f32;
        let shape = Shape::new(1, self.channels, self.height, self.width).expect("nonempty image");
        Tensor::from_fn(shape, |_, c, h, w| self.get(w, h, c) as f32 / max - 0.5)
    }

    /// Tensor with `channels` planes, replicating a gray image when needed.
    pub fn to_tensor_channels(&self, channels: usize) -> Result<Tensor> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.to_tensor()),
            (1, 3) => {
                let t = self.to_tensor();
                Tensor::stack(&[t.clone(), t.clone(), t])?
                    .reshape(Shape::new(1, 3, self.height, self.width)?)
            }
            (a, b) => Err(Error::InvalidArgument(format!("image has {a} channels, model expects {b}"))),
        }
    }

    /// Inverse of `to_tensor` for a single-item tensor, rounding and clamping.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 {
            return Err(Error::InvalidArgument(format!("batch of {} images, expected 1", s.n)));
        }
        let mut pixels = Vec::with_capacity(s.numel());
        for h in 0..s.h {
            for w in 0..s.w {
                for c in 0..s.c {
                    let v = ((t.get(0, c, h, w) + 0.5) * 255.0).round().clamp(0.0, 255.0);
                    pixels.push(v as u8);
                }
            }
        }
        Self::new(s.w, s.h, s.c, pixels)
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn token(&mut self) -> Result<String> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(Error::format("netpbm", "truncated header")),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
            self.pos += 1;
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| Error::format("netpbm", format!("bad {what} {tok:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P5 # gray\n# another\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 200]);
        let img = Image::decode(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 1));
        assert_eq!(img.pixels, vec![7, 200]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Image::decode(b"P3\n1 1\n255\n1 2 3").is_err());
        assert!(Image::decode(b"P6\n2 2\n255\n\x00\x01").is_err());
        assert!(Image::decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(Image::decode(b"P5\n1").is_err());
        assert!(Image::decode(b"P5\n0 1\n255\n").is_err());
    }

    #[test]
    fn tensor_mapping() {
        let img = Image::rgb(1, 1, vec![0, 255, 51]).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.data(), &[-0.5, 0.5, 0.2 - 0.5]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
        let g = Image::gray(2, 1, vec![0, 255]).unwrap().to_tensor_channels(3).unwrap();
        assert_eq!(g.shape().dims(), [1, 3, 1, 2]);
        assert_eq!(g.get(0, 2, 0, 1), 0.5);
    }

    proptest! {
        #[test]
        fn round_trip(w in 1usize..9, h in 1usize..9, rgb in any::<bool>(), seed in any::<u64>()) {
            let c = if rgb { 3 } else { 1 };
            let pixels = (0..w * h * c).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
            let img = Image::new(w, h, c, pixels).unwrap();
            let bytes = img.encode();
            let back = Image::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
