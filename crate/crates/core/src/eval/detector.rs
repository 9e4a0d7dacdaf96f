use serde::{Deserialize, Serialize};

use crate::grounding::BoundingBox;
use crate::world::{ClassId, Color, Image, ShapeKind};

/// Pixels whose brightest channel is below this are background.
pub const FOREGROUND_THRESHOLD: f64 = 0.2;
/// A channel counts as lit when it exceeds this fraction of the brightest one.
const CHANNEL_RATIO: f64 = 0.5;
/// Components smaller than this many pixels are treated as noise.
pub const MIN_COMPONENT_PIXELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class: ClassId,
    /// Mask agreement of the best shape template, in `[0, 1]`.
    pub confidence: f64,
}

/// Quantized color of one pixel, `None` for background or unnamed mixes.
pub fn pixel_color(rgb: [f64; 3]) -> Option<Color> {
    let m = rgb.iter().cloned().fold(f64::MIN, f64::max);
    if m <= FOREGROUND_THRESHOLD {
        return None;
    }
    Color::from_channels(rgb.map(|c| c > CHANNEL_RATIO * m))
}

/// Finds colored shapes: color quantization, 4-connected components per
/// color, then the shape whose template mask at the component's box size
/// agrees best with the component.
pub fn detect_shapes(image: &Image) -> Vec<Detection> {
    let (w, h) = (image.width(), image.height());
    let labels: Vec<Option<Color>> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| pixel_color(image.pixel(x, y))).collect();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        let Some(color) = labels[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if !seen[q] && labels[q] == Some(color) {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        if pixels.len() < MIN_COMPONENT_PIXELS {
            continue;
        }
        if let Some(d) = classify(&pixels, w, h, color) {
            out.push(d);
        }
    }
    out
}

fn classify(pixels: &[usize], w: usize, h: usize, color: Color) -> Option<Detection> {
    let x0 = pixels.iter().map(|p| p % w).min()?;
    let x1 = pixels.iter().map(|p| p % w).max()? + 1;
    let y0 = pixels.iter().map(|p| p / w).min()?;
    let y1 = pixels.iter().map(|p| p / w).max()? + 1;
    let (bw, bh) = (x1 - x0, y1 - y0);
    let mut mask = vec![false; bw * bh];
    for p in pixels {
        mask[(p / w - y0) * bw + (p % w - x0)] = true;
    }
    let (shape, score) = ShapeKind::ALL
        .into_iter()
        .map(|s| (s, mask_iou(&mask, &s.mask(bw, bh))))
        .fold(None, |best: Option<(ShapeKind, f64)>, (s, v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((s, v)),
        })?;
    let bbox = BoundingBox {
        x0: x0 as f64 / w as f64,
        y0: y0 as f64 / h as f64,
        x1: x1 as f64 / w as f64,
        y1: y1 as f64 / h as f64,
    };
    Some(Detection { bbox, class: ClassId::new(shape, color), confidence: score })
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
