use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grounding::BoundingBox;

/// Square RGB image stored row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn black(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!("{width}x{height} image needs {} values, got {}", width * height * 3, data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Pixels inside `b` (normalized to this image's size).
    pub fn crop(&self, b: &BoundingBox) -> Result<Image> {
        let (x0, y0, x1, y1) = pixel_extent(b, self.width, self.height);
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::invalid(format!("box {b:?} covers no pixels")));
        }
        let mut out = Image::black(x1 - x0, y1 - y0);
        for y in y0..y1 {
            for x in x0..x1 {
                out.set_pixel(x - x0, y - y0, self.pixel(x, y));
            }
        }
        Ok(out)
    }

    pub fn clamped(&self) -> Image {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    /// Binary PPM (P6, 8-bit) encoding of the clamped image.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm())?;
        Ok(())
    }

    /// Map to the diffusion range `[-1, 1]`.
    pub fn to_signed(&self) -> Vec<f64> {
        self.data.iter().map(|v| 2.0 * v - 1.0).collect()
    }

    pub fn from_signed(width: usize, height: usize, x: &[f64]) -> Result<Image> {
        Image::from_data(width, height, x.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect())
    }
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` of a box on a `w × h` image.
pub fn pixel_extent(b: &BoundingBox, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let px = |c: f64, n: usize| ((c * n as f64).round().max(0.0) as usize).min(n);
    (px(b.x0, w), px(b.y0, h), px(b.x1, w), px(b.y1, h))
}
