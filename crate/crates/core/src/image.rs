//! Grayscale rasters, boxes and the binary PGM codec.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major single-channel raster. Intensities are nominally in `[0, 1]`,
/// but intermediate states (noisy latents, byte-scaled difference maps) may
/// leave that range.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values", width * height),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: format!("{}x{}", self.width, self.height),
                got: format!("{}x{}", other.width, other.height),
            })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean over the pixels of `region`, clipped to the image.
    pub fn region_mean(&self, region: &BBox) -> f64 {
        let r = region.clip(self.width, self.height);
        let mut sum = 0.0;
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                sum += self.get(x, y);
            }
        }
        let n = r.area();
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Values inside `region` in raster order.
    pub fn region_values(&self, region: &BBox) -> Vec<f64> {
        let r = region.clip(self.width, self.height);
        let mut out = Vec::with_capacity(r.area());
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                out.push(self.get(x, y));
            }
        }
        out
    }

    pub fn squared_distance(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Quantizes to bytes: `round(clamp(v, 0, 1) * 255)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_vec(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Binary (P5) portable graymap with maxval 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
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
                return Err(Error::Parse("truncated PGM header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| Error::Parse(e.to_string()))?);
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if fields[0] != "P5" {
            return Err(Error::Parse(format!("unsupported PGM magic {:?}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("PGM header field {s:?}: {e}")));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(Error::Parse(format!("unsupported PGM maxval {maxval}")));
        }
        let raster = bytes.get(pos..pos + width * height).ok_or_else(|| Error::Parse("truncated PGM raster".into()))?;
        Self::from_bytes(width, height, raster)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes)
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", from = "[usize; 4]")]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1: x1.max(x0), y1: y1.max(y0) }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn clip(&self, width: usize, height: usize) -> BBox {
        BBox::new(self.x0.min(width), self.y0.min(height), self.x1.min(width), self.y1.min(height))
    }

    pub fn intersection(&self, other: &BBox) -> BBox {
        BBox::new(self.x0.max(other.x0), self.y0.max(other.y0), self.x1.min(other.x1), self.y1.min(other.y1))
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other).area();
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl From<[usize; 4]> for BBox {
    fn from(a: [usize; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

/// Rectangle in unit coordinates, resolved against an image side length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct UnitRect {
    pub u0: f64,
    pub v0: f64,
    pub u1: f64,
    pub v1: f64,
}

impl UnitRect {
    pub const fn new(u0: f64, v0: f64, u1: f64, v1: f64) -> Self {
        Self { u0, v0, u1, v1 }
    }

    pub fn to_pixels(&self, size: usize) -> BBox {
        let s = size as f64;
        let lo = |u: f64| ((u * s).floor().max(0.0) as usize).min(size);
        let hi = |u: f64| ((u * s).ceil().max(0.0) as usize).min(size);
        BBox::new(lo(self.u0), lo(self.v0), hi(self.u1), hi(self.v1))
    }
}

impl From<UnitRect> for [f64; 4] {
    fn from(r: UnitRect) -> Self {
        [r.u0, r.v0, r.u1, r.v1]
    }
}

impl From<[f64; 4]> for UnitRect {
    fn from(a: [f64; 4]) -> Self {
        UnitRect::new(a[0], a[1], a[2], a[3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_byte_exact() {
        let img = Image::from_fn(7, 5, |x, y| ((x * 5 + y) % 256) as f64 / 255.0);
        let bytes = img.to_pgm();
        assert!(bytes.starts_with(b"P5\n7 5\n255\n"));
        let back = Image::from_pgm(&bytes).unwrap();
        assert_eq!(back.to_pgm(), bytes);
    }

    #[test]
    fn pgm_rejects_other_maxval() {
        assert!(matches!(Image::from_pgm(b"P5\n1 1\n65535\n\0\0"), Err(Error::Parse(_))));
        assert!(Image::from_pgm(b"P5\n2 2\n255\n\0").is_err());
    }

    #[test]
    fn half_overlap_iou() {
        let a = BBox::new(0, 0, 10, 10);
        let b = BBox::new(5, 0, 15, 10);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(20, 20, 30, 30)), 0.0);
    }

    #[test]
    fn unit_rect_covers_whole_image() {
        assert_eq!(UnitRect::new(0.0, 0.0, 1.0, 1.0).to_pixels(64), BBox::new(0, 0, 64, 64));
        assert_eq!(UnitRect::new(0.25, 0.5, 0.5, 0.75).to_pixels(32), BBox::new(8, 16, 16, 24));
    }
}
