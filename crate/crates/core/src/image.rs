//! Linear RGB images with PFM and PPM I/O.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, top row first.
    pub pixels: Vec<[f64; 3]>,
}

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed PFM: {0}")]
    Format(String),
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for p in &self.pixels {
            for k in 0..3 {
                m[k] += p[k];
            }
        }
        m.map(|v| v / self.pixels.len().max(1) as f64)
    }

    /// Portable float map, little-endian, bottom row first.
    pub fn to_pfm(&self) -> Vec<u8> {
        let mut out = format!("PF\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for v in self.get(x, y) {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_pfm(bytes: &[u8]) -> Result<Self, ImageError> {
        let bad = |m: &str| ImageError::Format(m.to_string());
        // Three whitespace-terminated header tokens: "PF", "w h", scale.
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        pos += 1;
        if fields[0] != "PF" {
            return Err(bad("only colour PFM (PF) is supported"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let scale: f64 = fields[3].parse().map_err(|_| bad("scale"))?;
        let little = scale < 0.0;
        let data = bytes.get(pos..).ok_or_else(|| bad("missing data"))?;
        if data.len() != width * height * 12 {
            return Err(bad("data size does not match dimensions"));
        }
        let mut img = Image::new(width, height);
        for (i, c) in data.chunks_exact(4).enumerate() {
            let raw = [c[0], c[1], c[2], c[3]];
            let v = if little {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            let (pixel, ch) = (i / 3, i % 3);
            let (x, y) = (pixel % width, height - 1 - pixel / width);
            img.pixels[y * width + x][ch] = v as f64;
        }
        Ok(img)
    }

    /// 8-bit binary PPM after clamping and 1/2.2 gamma.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            for v in p {
                out.push((v.clamp(0.0, 1.0).powf(1.0 / 2.2) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn save_pfm(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        fs::File::create(path)?.write_all(&self.to_pfm())?;
        Ok(())
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        fs::File::create(path)?.write_all(&self.to_ppm())?;
        Ok(())
    }

    pub fn load_pfm(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        Self::from_pfm(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip() {
        let mut img = Image::new(3, 2);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = [i as f64, 0.5, -1.25];
        }
        let back = Image::from_pfm(&img.to_pfm()).unwrap();
        assert_eq!(back, img);
        assert!(Image::from_pfm(b"PF\n3 2\n-1.0\n\0\0").is_err());
        assert!(Image::from_pfm(b"P6\n1 1\n255\n").is_err());
    }

    #[test]
    fn ppm_encoding() {
        let mut img = Image::new(2, 1);
        img.pixels[0] = [1.0, 0.0, 2.0];
        img.pixels[1] = [0.5, 0.5, 0.5];
        let ppm = img.to_ppm();
        let body = &ppm[ppm.len() - 6..];
        assert_eq!(&body[..3], &[255, 0, 255]);
        assert_eq!(body[3], (0.5f64.powf(1.0 / 2.2) * 255.0).round() as u8);
        assert!(ppm.starts_with(b"P6\n2 1\n255\n"));
    }
}
