//! Grayscale images with intensities in `[0, 1]` and binary PGM (P5) I/O.

use std::path::Path;

use crate::error::{check_len, Error, Result};
use crate::fsio;

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        check_len("image pixels", width * height, pixels.len())?;
        Ok(GrayImage { width, height, pixels })
    }

    /// A square image from a flattened `side × side` buffer.
    pub fn square(pixels: Vec<f64>) -> Result<Self> {
        let side = (pixels.len() as f64).sqrt().round() as usize;
        GrayImage::new(side, side, pixels)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Population variance of the intensities.
    pub fn variance(&self) -> f64 {
        pixel_variance(&self.pixels)
    }

    /// Binary PGM with maxval 255; intensities are clamped to `[0, 1]` and
    /// rounded.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        fsio::write_atomic(path, &self.to_pgm())
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::format("pgm", reason);
        // header: magic, width, height, maxval separated by whitespace,
        // then exactly one whitespace byte before the raster
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary PGM (P5)"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(bad("only 8-bit PGM is supported"));
        }
        let raster = &bytes[(pos + 1).min(bytes.len())..];
        if raster.len() != w * h {
            return Err(bad("raster size does not match header"));
        }
        let pixels = raster.iter().map(|&b| f64::from(b) / maxval as f64).collect();
        GrayImage::new(w, h, pixels)
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        GrayImage::from_pgm(&fsio::read(path)?)
    }
}

pub fn pixel_variance(pixels: &[f64]) -> f64 {
    if pixels.is_empty() {
        return 0.0;
    }
    let n = pixels.len() as f64;
    let mean = pixels.iter().sum::<f64>() / n;
    pixels.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage::new(3, 2, vec![0.0, 1.0, 0.5, 0.2, 0.8, 1.0]).unwrap();
        let bytes = img.to_pgm();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let back = GrayImage::from_pgm(&bytes).unwrap();
        for (a, b) in back.pixels.iter().zip(&img.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn rejects_truncated_raster() {
        let mut bytes = GrayImage::new(2, 2, vec![0.0; 4]).unwrap().to_pgm();
        bytes.pop();
        assert!(GrayImage::from_pgm(&bytes).is_err());
        assert!(GrayImage::from_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn variance_of_constant_and_binary() {
        assert!(pixel_variance(&[0.3; 10]) < 1e-30);
        assert!((pixel_variance(&[0.0, 1.0]) - 0.25).abs() < 1e-15);
    }
}
