//! Grayscale raster and its binary PGM (P5) encoding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidConfig(format!(
                "pixel intensity {p} outside [0, 1]"
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value));
        ImageBuffer {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// The 8-bit levels written to disk: `round(p * 255)`.
    pub fn quantized(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p * 255.0).round() as u8)
            .collect()
    }

    /// Snaps every pixel to its 8-bit level, i.e. what a PGM round trip yields.
    pub fn to_quantized(&self) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            pixels: self
                .quantized()
                .into_iter()
                .map(|b| f64::from(b) / 255.0)
                .collect(),
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.quantized());
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        if magic != b"P5" {
            return Err(Error::format("PGM", "magic is not P5"));
        }
        let width = parse_header_int(next_token(bytes, &mut pos)?)?;
        let height = parse_header_int(next_token(bytes, &mut pos)?)?;
        let maxval = parse_header_int(next_token(bytes, &mut pos)?)?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::format("PGM", format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let raster = bytes
            .get(pos..pos + width * height)
            .ok_or_else(|| Error::format("PGM", "raster is truncated"))?;
        let scale = maxval as f64;
        let pixels = raster
            .iter()
            .map(|&b| (f64::from(b) / scale).min(1.0))
            .collect();
        ImageBuffer::new(width, height, pixels)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes)
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::format("PGM", "header is truncated")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn parse_header_int(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("PGM", "bad header integer"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let img = ImageBuffer::new(3, 2, vec![0.0, 0.5, 1.0, 0.2, 0.0, 1.0]).unwrap();
        let bytes = img.to_pgm();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[11..], &[0, 128, 255, 51, 0, 255]);
    }

    #[test]
    fn reads_comments_and_small_maxval() {
        let mut bytes = b"P5 # comment\n2 1\n# another\n15\n".to_vec();
        bytes.extend([15u8, 0]);
        let img = ImageBuffer::from_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[1.0, 0.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ImageBuffer::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ImageBuffer::new(1, 1, vec![1.5]).is_err());
        assert!(ImageBuffer::from_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(ImageBuffer::from_pgm(b"P5\n4 4\n255\n\0\0").is_err());
    }

    proptest! {
        #[test]
        fn pgm_round_trip_is_quantization(pixels in prop::collection::vec(0.0..=1.0f64, 12)) {
            let img = ImageBuffer::new(4, 3, pixels).unwrap();
            let back = ImageBuffer::from_pgm(&img.to_pgm()).unwrap();
            prop_assert_eq!(&back, &img.to_quantized());
            prop_assert_eq!(back.to_pgm(), img.to_pgm());
        }
    }
}
