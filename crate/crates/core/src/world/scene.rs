use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{pixel_extent, Image};
use super::shapes::{ClassId, Color, IdentityPattern, ShapeKind, NUM_COLORS, NUM_IDENTITIES};
use crate::error::{Error, Result};
use crate::grounding::BoundingBox;

pub const CANVAS: usize = 32;
pub const MIN_SUBJECTS: usize = 2;
pub const MAX_SCENE_SUBJECTS: usize = 6;

/// Token id of the begin-of-prompt marker; class `c` has token `1 + c`.
pub const BOS_TOKEN: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutMode {
    /// Each shape sits near its own anchor cell.
    Prior,
    /// Boxes of random size and position.
    Uniform,
}

impl std::str::FromStr for LayoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(Self::Prior),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::invalid(format!("unknown layout mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub class: ClassId,
    pub identity: IdentityPattern,
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub canvas: Image,
    pub prompt_tokens: Vec<u32>,
    pub subjects: Vec<SubjectSpec>,
    pub split: Split,
}

impl Scene {
    pub fn level(&self) -> usize {
        self.subjects.len()
    }
}

pub fn class_token(class: ClassId) -> u32 {
    1 + class.0 as u32
}

pub fn prompt_for(subjects: &[SubjectSpec]) -> Vec<u32> {
    std::iter::once(BOS_TOKEN).chain(subjects.iter().map(|s| class_token(s.class))).collect()
}

/// Anchor cell (column, row) of each shape on a 3×3 grid; the centre cell is unused.
pub fn prior_cell(shape: ShapeKind) -> (usize, usize) {
    match shape {
        ShapeKind::Square => (0, 0),
        ShapeKind::Circle => (1, 0),
        ShapeKind::TriangleUp => (2, 0),
        ShapeKind::TriangleDown => (0, 1),
        ShapeKind::Diamond => (2, 1),
        ShapeKind::Plus => (0, 2),
        ShapeKind::Frame => (1, 2),
        ShapeKind::Hourglass => (2, 2),
    }
}

/// Largest box side in uniform mode, shrinking with the subject count so
/// that crowded scenes still fit.
pub fn uniform_max_side(n: usize) -> usize {
    match n {
        0..=2 => 16,
        3..=4 => 13,
        _ => 11,
    }
}

pub const UNIFORM_MIN_SIDE: usize = 6;
const PRIOR_SIDES: std::ops::RangeInclusive<usize> = 8..=10;
const PLACEMENT_TRIES: usize = 200;
const SCENE_RESTARTS: usize = 50;

type Rect = (usize, usize, usize, usize);

/// Rectangles keep at least one background pixel between them.
fn separated(a: Rect, b: Rect) -> bool {
    a.2 < b.0 || b.2 < a.0 || a.3 < b.1 || b.3 < a.1
}

fn place(rng: &mut ChaCha8Rng, shape: ShapeKind, n: usize, mode: LayoutMode) -> Rect {
    match mode {
        LayoutMode::Prior => {
            let w = rng.gen_range(PRIOR_SIDES);
            let h = rng.gen_range(PRIOR_SIDES);
            let (col, row) = prior_cell(shape);
            let cell = CANVAS as f64 / 3.0;
            let cx = (col as f64 + 0.5) * cell + rng.gen_range(-1..=1) as f64;
            let cy = (row as f64 + 0.5) * cell + rng.gen_range(-1..=1) as f64;
            let x0 = ((cx - w as f64 / 2.0).round().max(0.0) as usize).min(CANVAS - w);
            let y0 = ((cy - h as f64 / 2.0).round().max(0.0) as usize).min(CANVAS - h);
            (x0, y0, x0 + w, y0 + h)
        }
        LayoutMode::Uniform => {
            let max = uniform_max_side(n);
            let w = rng.gen_range(UNIFORM_MIN_SIDE..=max);
            let h = rng.gen_range(UNIFORM_MIN_SIDE..=max);
            let x0 = rng.gen_range(0..=CANVAS - w);
            let y0 = rng.gen_range(0..=CANVAS - h);
            (x0, y0, x0 + w, y0 + h)
        }
    }
}

/// Samples a scene with `n` subjects of distinct shapes.
pub fn generate_scene(seed: u64, n: usize, mode: LayoutMode, split: Split) -> Result<Scene> {
    if !(MIN_SUBJECTS..=MAX_SCENE_SUBJECTS).contains(&n) {
        return Err(Error::invalid(format!("scenes hold {MIN_SUBJECTS}..={MAX_SCENE_SUBJECTS} subjects, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes = ShapeKind::ALL.to_vec();
    shapes.shuffle(&mut rng);
    shapes.truncate(n);
    let looks: Vec<(Color, IdentityPattern)> = shapes
        .iter()
        .map(|_| (Color::ALL[rng.gen_range(0..NUM_COLORS)], IdentityPattern::ALL[rng.gen_range(0..NUM_IDENTITIES)]))
        .collect();

    for _ in 0..SCENE_RESTARTS {
        let mut rects: Vec<Rect> = Vec::with_capacity(n);
        for &shape in &shapes {
            let found = (0..PLACEMENT_TRIES)
                .map(|_| place(&mut rng, shape, n, mode))
                .find(|r| rects.iter().all(|o| separated(*r, *o)));
            match found {
                Some(r) => rects.push(r),
                None => break,
            }
        }
        if rects.len() == n {
            let subjects = shapes
                .iter()
                .zip(&looks)
                .zip(&rects)
                .map(|((&shape, &(color, identity)), &(x0, y0, x1, y1))| {
                    Ok(SubjectSpec {
                        class: ClassId::new(shape, color),
                        identity,
                        bbox: BoundingBox::from_pixels(x0, y0, x1, y1, CANVAS)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(Scene {
                canvas: render(&subjects, CANVAS),
                prompt_tokens: prompt_for(&subjects),
                subjects,
                split,
            });
        }
    }
    Err(Error::invalid(format!("could not place {n} subjects after {SCENE_RESTARTS} attempts")))
}

/// Paints one subject onto `img`.
pub fn paint(img: &mut Image, s: &SubjectSpec) {
    let (x0, y0, x1, y1) = pixel_extent(&s.bbox, img.width(), img.height());
    let (w, h) = (x1 - x0, y1 - y0);
    let rgb = s.class.color().rgb();
    for j in 0..h {
        for i in 0..w {
            if s.class.shape().covers(i, j, w, h) {
                let b = s.identity.brightness(i, j, w, h);
                // Keep values exactly representable in the f32 dataset format.
                img.set_pixel(x0 + i, y0 + j, rgb.map(|c| (c * b) as f32 as f64));
            }
        }
    }
}

/// Renders subjects in list order on a black canvas; later subjects are drawn on top.
pub fn render(subjects: &[SubjectSpec], size: usize) -> Image {
    let mut img = Image::black(size, size);
    for s in subjects {
        paint(&mut img, s);
    }
    img
}

/// Deterministic per-stream seed, so that independent consumers (training
/// steps, batch slots, eval scenes) never share random streams.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
