use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_SHAPES: usize = 8;
pub const NUM_COLORS: usize = 5;
pub const NUM_CLASSES: usize = NUM_SHAPES * NUM_COLORS;
pub const NUM_IDENTITIES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    /// Disc; the "sun-like" shape that prefers the top of the canvas.
    Circle,
    TriangleUp,
    TriangleDown,
    Diamond,
    Plus,
    Frame,
    Hourglass,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; NUM_SHAPES] = [
        ShapeKind::Square,
        ShapeKind::Circle,
        ShapeKind::TriangleUp,
        ShapeKind::TriangleDown,
        ShapeKind::Diamond,
        ShapeKind::Plus,
        ShapeKind::Frame,
        ShapeKind::Hourglass,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::TriangleUp => "triangle_up",
            ShapeKind::TriangleDown => "triangle_down",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Plus => "plus",
            ShapeKind::Frame => "frame",
            ShapeKind::Hourglass => "hourglass",
        }
    }

    /// Whether pixel `(i, j)` of a `w × h` box is covered. Every shape touches
    /// all four edges of its box, so the tight bounding box of the mask is the
    /// box itself.
    pub fn covers(self, i: usize, j: usize, w: usize, h: usize) -> bool {
        let u = (i as f64 + 0.5) / w as f64;
        let v = (j as f64 + 0.5) / h as f64;
        let (du, dv) = ((u - 0.5).abs(), (v - 0.5).abs());
        let px = 0.5 / w.min(h) as f64;
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => du * du + dv * dv <= 0.25 + px * px,
            ShapeKind::TriangleUp => du <= v * 0.5 + px,
            ShapeKind::TriangleDown => du <= (1.0 - v) * 0.5 + px,
            ShapeKind::Diamond => du + dv <= 0.5 + px,
            ShapeKind::Plus => du <= 0.17 || dv <= 0.17,
            ShapeKind::Frame => {
                let t = 2.max(w.min(h) / 4);
                i < t || j < t || i + t >= w || j + t >= h
            }
            ShapeKind::Hourglass => du <= dv + px,
        }
    }

    /// Row-major coverage mask of a `w × h` box.
    pub fn mask(self, w: usize, h: usize) -> Vec<bool> {
        (0..h).flat_map(|j| (0..w).map(move |i| self.covers(i, j, w, h))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Yellow,
    Green,
    Blue,
    Magenta,
}

impl Color {
    pub const ALL: [Color; NUM_COLORS] = [Color::Red, Color::Yellow, Color::Green, Color::Blue, Color::Magenta];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
        }
    }

    /// Color whose on/off channel pattern equals `on`, if any.
    pub fn from_channels(on: [bool; 3]) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.rgb().map(|v| v > 0.5) == on)
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Yellow => "yellow",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Magenta => "magenta",
        }
    }
}

/// One of the 40 shape-and-color classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId(pub u8);

impl ClassId {
    pub fn new(shape: ShapeKind, color: Color) -> Self {
        ClassId((shape.index() * NUM_COLORS + color.index()) as u8)
    }

    pub fn from_index(i: usize) -> Result<Self> {
        if i >= NUM_CLASSES {
            return Err(Error::invalid(format!("class id {i} outside the {NUM_CLASSES}-class vocabulary")));
        }
        Ok(ClassId(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn shape(self) -> ShapeKind {
        ShapeKind::ALL[self.index() / NUM_COLORS]
    }

    pub fn color(self) -> Color {
        Color::ALL[self.index() % NUM_COLORS]
    }

    pub fn name(self) -> String {
        format!("{}_{}", self.color().name(), self.shape().name())
    }
}

/// Instance texture: a brightness pattern in `[0.4, 1]` laid over the shape.
/// Stripes, dots and rings repeat with a fixed pixel period and the gradient
/// spans the box height, so an identity looks alike at every box size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityPattern {
    Stripes,
    Dots,
    Gradient,
    Ring,
}

pub const DIM: f64 = 0.4;

impl IdentityPattern {
    pub const ALL: [IdentityPattern; NUM_IDENTITIES] =
        [IdentityPattern::Stripes, IdentityPattern::Dots, IdentityPattern::Gradient, IdentityPattern::Ring];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("identity id {i} outside 0..{NUM_IDENTITIES}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Brightness of pixel `(i, j)` inside a `w × h` box.
    pub fn brightness(self, i: usize, j: usize, w: usize, h: usize) -> f64 {
        match self {
            IdentityPattern::Stripes => {
                if (j / 2).is_multiple_of(2) {
                    1.0
                } else {
                    DIM
                }
            }
            IdentityPattern::Dots => {
                if i % 3 == 1 && j % 3 == 1 {
                    DIM
                } else {
                    1.0
                }
            }
            IdentityPattern::Gradient => DIM + (1.0 - DIM) * (j as f64 / (h - 1).max(1) as f64),
            IdentityPattern::Ring => {
                let edge = i.min(j).min(w - 1 - i).min(h - 1 - j);
                if (edge / 2).is_multiple_of(2) {
                    1.0
                } else {
                    DIM
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_shape_touches_all_box_edges() {
        for shape in ShapeKind::ALL {
            for w in 4..=20 {
                for h in 4..=20 {
                    let m = shape.mask(w, h);
                    let at = |i: usize, j: usize| m[j * w + i];
                    assert!((0..w).any(|i| at(i, 0)), "{shape:?} {w}x{h} top");
                    assert!((0..w).any(|i| at(i, h - 1)), "{shape:?} {w}x{h} bottom");
                    assert!((0..h).any(|j| at(0, j)), "{shape:?} {w}x{h} left");
                    assert!((0..h).any(|j| at(w - 1, j)), "{shape:?} {w}x{h} right");
                }
            }
        }
    }

    #[test]
    fn shape_masks_are_4_connected() {
        for shape in ShapeKind::ALL {
            for w in 5..=16 {
                for h in 5..=16 {
                    let m = shape.mask(w, h);
                    let start = m.iter().position(|&b| b).unwrap();
                    let mut seen = vec![false; m.len()];
                    let mut stack = vec![start];
                    seen[start] = true;
                    while let Some(p) = stack.pop() {
                        let (i, j) = (p % w, p / w);
                        let mut nb = Vec::new();
                        if i > 0 {
                            nb.push(p - 1);
                        }
                        if i + 1 < w {
                            nb.push(p + 1);
                        }
                        if j > 0 {
                            nb.push(p - w);
                        }
                        if j + 1 < h {
                            nb.push(p + w);
                        }
                        for q in nb {
                            if m[q] && !seen[q] {
                                seen[q] = true;
                                stack.push(q);
                            }
                        }
                    }
                    let total = m.iter().filter(|&&b| b).count();
                    let reached = seen.iter().filter(|&&b| b).count();
                    assert_eq!(total, reached, "{shape:?} {w}x{h}");
                }
            }
        }
    }

    #[test]
    fn shapes_are_distinct_at_every_size() {
        for w in 5..=16 {
            for h in 5..=16 {
                for (a, sa) in ShapeKind::ALL.iter().enumerate() {
                    for sb in &ShapeKind::ALL[a + 1..] {
                        assert_ne!(sa.mask(w, h), sb.mask(w, h), "{sa:?} vs {sb:?} at {w}x{h}");
                    }
                }
            }
        }
    }

    #[test]
    fn class_ids_round_trip() {
        for i in 0..NUM_CLASSES {
            let c = ClassId::from_index(i).unwrap();
            assert_eq!(ClassId::new(c.shape(), c.color()), c);
        }
        assert!(ClassId::from_index(NUM_CLASSES).is_err());
        assert_eq!(Color::from_channels([true, false, true]), Some(Color::Magenta));
        assert_eq!(Color::from_channels([true, true, true]), None);
    }

    #[test]
    fn brightness_in_range() {
        for p in IdentityPattern::ALL {
            for j in 0..12 {
                for i in 0..12 {
                    let b = p.brightness(i, j, 12, 12);
                    assert!((DIM..=1.0).contains(&b));
                }
            }
        }
    }
}
