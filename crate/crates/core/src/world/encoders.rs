use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use super::scene::{class_token, BOS_TOKEN};
use super::shapes::{ClassId, NUM_CLASSES, NUM_COLORS, NUM_SHAPES};
use crate::error::{Error, Result};
use crate::nn::param::normal_tensor;
use crate::nn::Tensor;

pub const PATCH: usize = 4;
/// Width of an image patch token: a flattened 4×4 RGB patch.
pub const PATCH_DIM: usize = PATCH * PATCH * 3;
pub const MAX_PROMPT_LEN: usize = 16;
pub const VOCAB_SIZE: usize = 1 + NUM_CLASSES;

/// Frozen stand-ins for the text and image encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoders {
    /// `VOCAB_SIZE × d_text` token embeddings.
    pub token_table: Tensor,
    /// `PATCH_DIM × PATCH_DIM` orthogonal patch projection.
    pub projection: Tensor,
}

impl ToyEncoders {
    /// Class tokens are compositional: the normalized sum of a shape vector
    /// and a color vector, scaled to unit variance per coordinate.
    pub fn new(seed: u64, d_text: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = normal_tensor(&mut rng, &[NUM_SHAPES, d_text], 1.0);
        let colors = normal_tensor(&mut rng, &[NUM_COLORS, d_text], 1.0);
        let bos = normal_tensor(&mut rng, &[1, d_text], 1.0);
        let mut table = Tensor::zeros(&[VOCAB_SIZE, d_text]);
        table.row_mut(BOS_TOKEN as usize).copy_from_slice(bos.data());
        let scale = (d_text as f64).sqrt();
        for c in 0..NUM_CLASSES {
            let class = ClassId(c as u8);
            let v: Vec<f64> = shapes
                .row(class.shape().index())
                .iter()
                .zip(colors.row(class.color().index()))
                .map(|(a, b)| a + b)
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let row = table.row_mut(class_token(class) as usize);
            for (o, x) in row.iter_mut().zip(&v) {
                *o = x / norm * scale;
            }
        }
        let projection = orthogonal(&normal_tensor(&mut rng, &[PATCH_DIM, PATCH_DIM], 1.0));
        Self { token_table: table, projection }
    }

    pub fn d_text(&self) -> usize {
        self.token_table.cols()
    }

    pub fn d_img(&self) -> usize {
        PATCH_DIM
    }

    /// Token features of a prompt; an empty prompt gives a zero-row block.
    pub fn encode_prompt(&self, tokens: &[u32]) -> Result<Tensor> {
        if tokens.len() > MAX_PROMPT_LEN {
            return Err(Error::invalid(format!("prompt of {} tokens exceeds {MAX_PROMPT_LEN}", tokens.len())));
        }
        let mut out = Tensor::zeros(&[tokens.len(), self.d_text()]);
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= VOCAB_SIZE {
                return Err(Error::invalid(format!("unknown token id {t}")));
            }
            out.row_mut(i).copy_from_slice(self.token_table.row(t as usize));
        }
        Ok(out)
    }

    /// The class token feature `f_T` of a class.
    pub fn class_feature(&self, class: ClassId) -> Vec<f64> {
        self.token_table.row(class_token(class) as usize).to_vec()
    }

    /// Patch tokens (`P × 48`) and the unit-norm pooled embedding of a crop.
    /// Crops are cut into 4×4 patches from the top-left corner; ragged
    /// borders are filled by repeating the last row / column.
    pub fn encode_reference(&self, crop: &Image) -> Result<(Tensor, Vec<f64>)> {
        let (w, h) = (crop.width(), crop.height());
        if w == 0 || h == 0 {
            return Err(Error::invalid("empty reference crop"));
        }
        let (pw, ph) = (w.div_ceil(PATCH), h.div_ceil(PATCH));
        let mut patches = Tensor::zeros(&[pw * ph, PATCH_DIM]);
        for py in 0..ph {
            for px in 0..pw {
                let row = patches.row_mut(py * pw + px);
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let x = (px * PATCH + dx).min(w - 1);
                        let y = (py * PATCH + dy).min(h - 1);
                        let o = (dy * PATCH + dx) * 3;
                        for (c, v) in crop.pixel(x, y).iter().enumerate() {
                            row[o + c] = 2.0 * v - 1.0;
                        }
                    }
                }
            }
        }
        let tokens = patches.matmul(&self.projection)?.map(f64::tanh);
        let mut pooled = tokens.sum_rows();
        let norm = pooled.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::NonFinite("reference embedding has zero norm".into()));
        }
        pooled.iter_mut().for_each(|x| *x /= norm);
        Ok((tokens, pooled))
    }
}

/// Gram-Schmidt orthonormalization of the columns of a square matrix.
fn orthogonal(m: &Tensor) -> Tensor {
    let n = m.rows();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| m.row(i)[j]).collect()).collect();
    for j in 0..n {
        for k in 0..j {
            let d: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
            let prev = cols[k].clone();
            cols[j].iter_mut().zip(&prev).for_each(|(a, b)| *a -= d * b);
        }
        let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|x| *x /= norm);
    }
    let mut out = Tensor::zeros(&[n, n]);
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            out.row_mut(i)[j] = *v;
        }
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
