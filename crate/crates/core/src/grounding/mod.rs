//! Grounding tokens: per-subject condition tokens that fuse a subject
//! descriptor with the Fourier encoding of its bounding box.
//!
//! * Layout tokens `G_T` (one per subject): `MLP([f_T, Fourier(B)])`.
//! * Subject tokens `G_I` (four per subject): the resampled image tokens with
//!   `MLP(Fourier(B))` added to each of them. The concatenation-style variant
//!   (`MLP([f_I^j, Fourier(B)])` per token) is kept as an ablation arm.
//!
//! Every sample is padded to [`MAX_SUBJECTS`] slots; unused or dropped slots
//! are filled with trainable empty tokens.

mod boxes;
mod dropout;
mod resampler;

pub use boxes::{fourier_embed, BoundingBox, DEFAULT_FREQ_COUNT};
pub use dropout::{pad_and_dropout, PaddedConditions};
pub use resampler::{PerceiverLayer, Resampler, ResamplerCache};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{IMAGE_TOKENS_PER_SUBJECT, MAX_SUBJECTS};
use crate::error::{Error, Result};
use crate::nn::param::normal_tensor;
use crate::nn::{MlpCache, MlpSiLU, Module, Parameter, Tensor};

/// How box features are fused into the subject image tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageGroundingStyle {
    /// Box embedding added to each resampled token.
    Additive,
    /// Each token concatenated with the box features and fused by an MLP.
    Concatenated,
}

impl std::str::FromStr for ImageGroundingStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(Self::Additive),
            "concatenated" => Ok(Self::Concatenated),
            _ => Err(Error::invalid(format!("unknown grounding style `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingConfig {
    pub d_text: usize,
    pub d_img: usize,
    pub freq_count: usize,
    pub mlp_hidden: usize,
    pub resampler_depth: usize,
    pub resampler_ff_mult: usize,
    pub style: ImageGroundingStyle,
}

impl GroundingConfig {
    pub fn box_dim(&self) -> usize {
        4 * self.freq_count
    }
}

/// Encoded features of one present subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectCondition {
    /// Class-text feature `f_T` (length `d_text`).
    pub class_feature: Vec<f64>,
    /// Reference-image patch tokens, `P × d_img`.
    pub patch_tokens: Tensor,
    pub bbox: BoundingBox,
}

/// Layout tokens of one subject, `G_T^i = MLP([f_T, Fourier(B)])`.
pub fn build_text_grounding(class_feature: &[f64], bbox: &BoundingBox, mlp: &MlpSiLU, freq_count: usize) -> Result<Vec<f64>> {
    let mut input = class_feature.to_vec();
    input.extend(fourier_embed(bbox, freq_count)?);
    if input.len() != mlp.d_in() {
        return Err(Error::shape(format!("text grounding mlp takes {} features, got {}", mlp.d_in(), input.len())));
    }
    Ok(mlp.forward(&Tensor::from_vec(&[1, input.len()], input)?)?.into_data())
}

/// Additive subject grounding: `G_I^{i,j} = MLP(Fourier(B)) + f_I^j`.
pub fn build_image_grounding(tokens: &Tensor, bbox: &BoundingBox, box_mlp: &MlpSiLU, freq_count: usize) -> Result<Tensor> {
    if box_mlp.d_out() != tokens.cols() {
        return Err(Error::shape(format!(
            "box mlp emits {} features, tokens have {}",
            box_mlp.d_out(),
            tokens.cols()
        )));
    }
    let f = fourier_embed(bbox, freq_count)?;
    let emb = box_mlp.forward(&Tensor::from_vec(&[1, f.len()], f)?)?;
    let mut out = tokens.clone();
    out.add_row_broadcast(emb.data())?;
    Ok(out)
}

/// Concatenation-style subject grounding: `MLP([f_I^j, Fourier(B)])` per token.
pub fn build_concat_image_grounding(tokens: &Tensor, bbox: &BoundingBox, mlp: &MlpSiLU, freq_count: usize) -> Result<Tensor> {
    let f = fourier_embed(bbox, freq_count)?;
    let fb = Tensor::from_rows(&vec![f; tokens.rows()])?;
    let input = Tensor::concat_cols(tokens, &fb)?;
    if input.cols() != mlp.d_in() {
        return Err(Error::shape(format!("concat mlp takes {} features, got {}", mlp.d_in(), input.cols())));
    }
    mlp.forward(&input)
}

/// All trainable pieces that turn subject conditions into grounding tokens.
#[derive(Clone, Debug)]
pub struct GroundingModule {
    pub config: GroundingConfig,
    pub text_mlp: MlpSiLU,
    pub box_mlp: MlpSiLU,
    pub concat_mlp: MlpSiLU,
    pub resampler: Resampler,
    /// `1 × d_text`, fills layout slots without a subject.
    pub empty_text: Parameter,
    /// `4 × d_img`, fills subject slots without a subject.
    pub empty_image: Parameter,
    /// `1 × d_img`, box embedding of slots without a subject.
    pub empty_box: Parameter,
}

#[derive(Clone, Debug)]
struct ImageSlotCache {
    slot: usize,
    resampler: ResamplerCache,
    tokens: Tensor,
}

/// Saved activations of [`GroundingModule::forward`].
#[derive(Clone, Debug)]
pub struct GroundingCache {
    present: Vec<usize>,
    text: Option<MlpCache>,
    box_mlp: Option<MlpCache>,
    concat: Option<MlpCache>,
    images: Vec<ImageSlotCache>,
}

/// `G_T` (`10 × d_text`) and `G_I` (`40 × d_img`); either may be empty when
/// not requested.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingTokens {
    pub text: Tensor,
    pub image: Tensor,
}

impl GroundingModule {
    pub fn new(config: GroundingConfig, rng: &mut impl Rng) -> Self {
        let GroundingConfig { d_text, d_img, mlp_hidden, .. } = config;
        let fb = config.box_dim();
        Self {
            config,
            text_mlp: MlpSiLU::new("grounding.text_mlp", d_text + fb, mlp_hidden, d_text, rng),
            box_mlp: MlpSiLU::new("grounding.box_mlp", fb, mlp_hidden, d_img, rng),
            concat_mlp: MlpSiLU::new("grounding.concat_mlp", d_img + fb, mlp_hidden, d_img, rng),
            resampler: Resampler::new("grounding.resampler", d_img, config.resampler_depth, config.resampler_ff_mult, rng),
            empty_text: Parameter::new("grounding.empty_text", normal_tensor(rng, &[1, d_text], 0.1)),
            empty_image: Parameter::new("grounding.empty_image", normal_tensor(rng, &[IMAGE_TOKENS_PER_SUBJECT, d_img], 0.1)),
            empty_box: Parameter::new("grounding.empty_box", normal_tensor(rng, &[1, d_img], 0.1)),
        }
    }

    /// Builds the padded grounding blocks for one sample.
    pub fn forward(&self, conds: &PaddedConditions, want_text: bool, want_image: bool) -> Result<(GroundingTokens, GroundingCache)> {
        let cfg = &self.config;
        let present: Vec<usize> = conds.slots.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|_| i)).collect();
        let mut cache = GroundingCache { present: present.clone(), text: None, box_mlp: None, concat: None, images: Vec::new() };

        let mut g_text = Tensor::empty_rows(cfg.d_text);
        if want_text {
            g_text = Tensor::zeros(&[MAX_SUBJECTS, cfg.d_text]);
            for i in 0..MAX_SUBJECTS {
                g_text.row_mut(i).copy_from_slice(self.empty_text.value.data());
            }
            if !present.is_empty() {
                let rows: Vec<Vec<f64>> = present
                    .iter()
                    .map(|&i| {
                        let s = conds.slots[i].as_ref().expect("present");
                        check_len(&s.class_feature, cfg.d_text)?;
                        let mut r = s.class_feature.clone();
                        r.extend(fourier_embed(&s.bbox, cfg.freq_count)?);
                        Ok(r)
                    })
                    .collect::<Result<_>>()?;
                let (out, c) = self.text_mlp.forward_cached(&Tensor::from_rows(&rows)?)?;
                for (r, &i) in present.iter().enumerate() {
                    g_text.row_mut(i).copy_from_slice(out.row(r));
                }
                cache.text = Some(c);
            }
        }

        let mut g_image = Tensor::empty_rows(cfg.d_img);
        if want_image {
            let n_tok = IMAGE_TOKENS_PER_SUBJECT;
            g_image = Tensor::zeros(&[MAX_SUBJECTS * n_tok, cfg.d_img]);
            for i in 0..MAX_SUBJECTS {
                for j in 0..n_tok {
                    let row = g_image.row_mut(i * n_tok + j);
                    for ((o, e), b) in row.iter_mut().zip(self.empty_image.value.row(j)).zip(self.empty_box.value.data()) {
                        *o = e + b;
                    }
                }
            }
            if !present.is_empty() {
                for &i in &present {
                    let s = conds.slots[i].as_ref().expect("present");
                    let (tokens, rc) = self.resampler.forward(&s.patch_tokens)?;
                    cache.images.push(ImageSlotCache { slot: i, resampler: rc, tokens });
                }
                match cfg.style {
                    ImageGroundingStyle::Additive => {
                        let rows: Vec<Vec<f64>> = present
                            .iter()
                            .map(|&i| fourier_embed(&conds.slots[i].as_ref().expect("present").bbox, cfg.freq_count))
                            .collect::<Result<_>>()?;
                        let (emb, c) = self.box_mlp.forward_cached(&Tensor::from_rows(&rows)?)?;
                        for (r, img) in cache.images.iter().enumerate() {
                            for j in 0..n_tok {
                                let row = g_image.row_mut(img.slot * n_tok + j);
                                for ((o, t), b) in row.iter_mut().zip(img.tokens.row(j)).zip(emb.row(r)) {
                                    *o = t + b;
                                }
                            }
                        }
                        cache.box_mlp = Some(c);
                    }
                    ImageGroundingStyle::Concatenated => {
                        let mut rows = Vec::with_capacity(present.len() * n_tok);
                        for img in &cache.images {
                            let f = fourier_embed(&conds.slots[img.slot].as_ref().expect("present").bbox, cfg.freq_count)?;
                            for j in 0..n_tok {
                                let mut r = img.tokens.row(j).to_vec();
                                r.extend_from_slice(&f);
                                rows.push(r);
                            }
                        }
                        let (out, c) = self.concat_mlp.forward_cached(&Tensor::from_rows(&rows)?)?;
                        for (r, img) in cache.images.iter().enumerate() {
                            for j in 0..n_tok {
                                g_image.row_mut(img.slot * n_tok + j).copy_from_slice(out.row(r * n_tok + j));
                            }
                        }
                        cache.concat = Some(c);
                    }
                }
            }
        }
        Ok((GroundingTokens { text: g_text, image: g_image }, cache))
    }

    /// Accumulates gradients from `dL/dG_T` and `dL/dG_I`. Either gradient may
    /// be an empty block when the corresponding tokens were not built.
    pub fn backward(&mut self, cache: &GroundingCache, d_text: &Tensor, d_image: &Tensor) -> Result<()> {
        let cfg = self.config;
        let n_tok = IMAGE_TOKENS_PER_SUBJECT;
        let is_present = |i: usize| cache.present.contains(&i);

        if d_text.rows() > 0 {
            if self.empty_text.requires_grad() {
                let mut g = Tensor::zeros(&[1, cfg.d_text]);
                for i in (0..MAX_SUBJECTS).filter(|&i| !is_present(i)) {
                    for (a, b) in g.data_mut().iter_mut().zip(d_text.row(i)) {
                        *a += b;
                    }
                }
                self.empty_text.accumulate(&g)?;
            }
            if let Some(c) = &cache.text {
                if self.text_mlp.requires_grad() {
                    let rows: Vec<Vec<f64>> = cache.present.iter().map(|&i| d_text.row(i).to_vec()).collect();
                    self.text_mlp.backward(c, &Tensor::from_rows(&rows)?)?;
                }
            }
        }

        if d_image.rows() > 0 {
            if self.empty_image.requires_grad() || self.empty_box.requires_grad() {
                let mut gi = Tensor::zeros(&[n_tok, cfg.d_img]);
                let mut gb = Tensor::zeros(&[1, cfg.d_img]);
                for i in (0..MAX_SUBJECTS).filter(|&i| !is_present(i)) {
                    for j in 0..n_tok {
                        let src = d_image.row(i * n_tok + j);
                        for ((a, b), s) in gi.row_mut(j).iter_mut().zip(gb.data_mut().iter_mut()).zip(src) {
                            *a += s;
                            *b += s;
                        }
                    }
                }
                self.empty_image.accumulate(&gi)?;
                self.empty_box.accumulate(&gb)?;
            }
            let block = |slot: usize| d_image.slice_rows(slot * n_tok, (slot + 1) * n_tok);
            let mut d_tokens: Vec<Tensor> = Vec::with_capacity(cache.images.len());
            match cfg.style {
                ImageGroundingStyle::Additive => {
                    if let Some(c) = &cache.box_mlp {
                        if self.box_mlp.requires_grad() {
                            let rows: Vec<Vec<f64>> = cache.images.iter().map(|img| block(img.slot).sum_rows()).collect();
                            self.box_mlp.backward(c, &Tensor::from_rows(&rows)?)?;
                        }
                    }
                    d_tokens.extend(cache.images.iter().map(|img| block(img.slot)));
                }
                ImageGroundingStyle::Concatenated => {
                    if let Some(c) = &cache.concat {
                        let mut rows = Vec::with_capacity(cache.images.len() * n_tok);
                        for img in &cache.images {
                            let b = block(img.slot);
                            rows.extend((0..n_tok).map(|j| b.row(j).to_vec()));
                        }
                        let d_in = self.concat_mlp.backward(c, &Tensor::from_rows(&rows)?)?;
                        for r in 0..cache.images.len() {
                            d_tokens.push(d_in.slice_rows(r * n_tok, (r + 1) * n_tok).slice_cols(0, cfg.d_img));
                        }
                    }
                }
            }
            if self.resampler.requires_grad() {
                for (img, d) in cache.images.iter().zip(&d_tokens) {
                    self.resampler.backward(&img.resampler, d)?;
                }
            }
        }
        Ok(())
    }
}

fn check_len(v: &[f64], want: usize) -> Result<()> {
    if v.len() != want {
        return Err(Error::shape(format!("class feature has {} values, expected {want}", v.len())));
    }
    Ok(())
}

impl Module for GroundingModule {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.text_mlp.visit_params(f);
        self.box_mlp.visit_params(f);
        self.concat_mlp.visit_params(f);
        self.resampler.visit_params(f);
        f(&self.empty_text);
        f(&self.empty_image);
        f(&self.empty_box);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.text_mlp.visit_params_mut(f);
        self.box_mlp.visit_params_mut(f);
        self.concat_mlp.visit_params_mut(f);
        self.resampler.visit_params_mut(f);
        f(&mut self.empty_text);
        f(&mut self.empty_image);
        f(&mut self.empty_box);
    }
}

#[cfg(test)]
mod tests;
