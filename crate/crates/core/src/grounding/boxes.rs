use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frequencies per box: 8 sin/cos pairs per coordinate, 64 features total.
pub const DEFAULT_FREQ_COUNT: usize = 16;

/// Axis-aligned box in normalized canvas coordinates, `y` pointing down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |c: f64| (0.0..=1.0).contains(&c);
        if ![self.x0, self.y0, self.x1, self.y1].into_iter().all(in_unit) {
            return Err(Error::invalid(format!("box coordinates outside [0,1]: {self:?}")));
        }
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::invalid(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    /// Box covering pixels `[px0, px1) × [py0, py1)` of a `size × size` canvas.
    pub fn from_pixels(px0: usize, py0: usize, px1: usize, py1: usize, size: usize) -> Result<Self> {
        let s = size as f64;
        Self::new(px0 as f64 / s, py0 as f64 / s, px1 as f64 / s, py1 as f64 / s)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Intersection over union.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }
}

/// Fourier features of a box: for each coordinate `c` in `(x0, y0, x1, y1)`
/// and `j < freq_count / 2`, the pair `sin(2^j π c), cos(2^j π c)`.
pub fn fourier_embed(b: &BoundingBox, freq_count: usize) -> Result<Vec<f64>> {
    if freq_count == 0 || !freq_count.is_multiple_of(2) {
        return Err(Error::invalid(format!("freq_count must be positive and even, got {freq_count}")));
    }
    if let Some(c) = b.coords().into_iter().find(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::invalid(format!("box coordinate {c} outside [0,1]")));
    }
    let mut out = Vec::with_capacity(4 * freq_count);
    for c in b.coords() {
        for j in 0..freq_count / 2 {
            let a = (1u64 << j) as f64 * PI * c;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    Ok(out)
}
