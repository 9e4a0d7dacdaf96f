//! Cross-attention with text, grounding-text and grounding-image conditions.
//!
//! Four modes share one set of projections:
//!
//! | mode         | output                                                        |
//! |--------------|---------------------------------------------------------------|
//! | `Ca`         | `σ(QKᵀ/√d) V`                                                 |
//! | `DcaLayout`  | `σ(QKᵀ/√d) V + λ σ(QK_Tᵀ/√d) V_T + λ σ(QK_Iᵀ/√d) V_I`         |
//! | `Cca`        | `σ(Q[K, K_T]ᵀ/√d) [V, V_T]`                                   |
//! | `Fca`        | `σ(Q[K, K_T]ᵀ/√d) [V, V_T] + λ σ(QK_Iᵀ/√d) V_I`               |
//!
//! `K, V` project the prompt tokens, `K_T, V_T` the grounding-text tokens and
//! `K_I, V_I` the grounding-image tokens. A term whose key set is empty
//! contributes exactly zero, so dropped conditions are length-0 blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attend, attend_backward, AttentionWeights, Linear, Module, Parameter, Tensor};

/// Maximum number of subject slots per sample.
pub const MAX_SUBJECTS: usize = 10;
/// Grounding-image tokens per subject.
pub const IMAGE_TOKENS_PER_SUBJECT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Ca,
    DcaLayout,
    Cca,
    Fca,
}

impl AttentionMode {
    pub fn uses_grounding_text(self) -> bool {
        !matches!(self, AttentionMode::Ca)
    }

    pub fn uses_grounding_image(self) -> bool {
        matches!(self, AttentionMode::DcaLayout | AttentionMode::Fca)
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ca" => Ok(Self::Ca),
            "dca_layout" => Ok(Self::DcaLayout),
            "cca" => Ok(Self::Cca),
            "fca" => Ok(Self::Fca),
            _ => Err(Error::invalid(format!("unknown attention mode `{s}`"))),
        }
    }
}

/// Conditioning tokens for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    /// `L × d_text` encoded prompt.
    pub text: Tensor,
    /// `N × d_text` layout grounding tokens.
    pub grounding_text: Tensor,
    /// `4N × d_img` subject grounding tokens.
    pub grounding_image: Tensor,
}

impl ConditionBundle {
    pub fn empty(d_text: usize, d_img: usize) -> Self {
        Self {
            text: Tensor::empty_rows(d_text),
            grounding_text: Tensor::empty_rows(d_text),
            grounding_image: Tensor::empty_rows(d_img),
        }
    }

    pub fn validate(&self, d_text: usize, d_img: usize) -> Result<()> {
        if self.text.cols() != d_text || self.grounding_text.cols() != d_text {
            return Err(Error::shape(format!("text blocks must have {d_text} features")));
        }
        if self.grounding_image.cols() != d_img {
            return Err(Error::shape(format!("image block must have {d_img} features")));
        }
        if self.grounding_text.rows() > MAX_SUBJECTS {
            return Err(Error::invalid(format!(
                "{} grounding tokens exceed the {MAX_SUBJECTS}-subject limit",
                self.grounding_text.rows()
            )));
        }
        if self.grounding_image.rows() > MAX_SUBJECTS * IMAGE_TOKENS_PER_SUBJECT {
            return Err(Error::invalid("too many grounding-image tokens"));
        }
        Ok(())
    }

    pub fn is_all_empty(&self) -> bool {
        self.text.rows() == 0 && self.grounding_text.rows() == 0 && self.grounding_image.rows() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionConfig {
    pub d_model: usize,
    pub d_text: usize,
    pub d_img: usize,
    pub d_h: usize,
    pub heads: usize,
    pub lambda: f64,
    pub mode: AttentionMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Text,
    GroundingText,
    GroundingImage,
}

/// One softmax term: keys from the listed sources, scaled by `scale`.
#[derive(Clone, Copy, Debug)]
struct Term {
    sources: &'static [Source],
    lambda_scaled: bool,
}

const TEXT: Term = Term { sources: &[Source::Text], lambda_scaled: false };
const TEXT_AND_LAYOUT: Term = Term { sources: &[Source::Text, Source::GroundingText], lambda_scaled: false };
const LAYOUT_SIDE: Term = Term { sources: &[Source::GroundingText], lambda_scaled: true };
const IMAGE_SIDE: Term = Term { sources: &[Source::GroundingImage], lambda_scaled: true };

fn terms_for(mode: AttentionMode) -> &'static [Term] {
    match mode {
        AttentionMode::Ca => &[TEXT],
        AttentionMode::DcaLayout => &[TEXT, LAYOUT_SIDE, IMAGE_SIDE],
        AttentionMode::Cca => &[TEXT_AND_LAYOUT],
        AttentionMode::Fca => &[TEXT_AND_LAYOUT, IMAGE_SIDE],
    }
}

#[derive(Clone, Debug)]
pub struct CrossAttentionLayer {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_kt: Linear,
    pub w_vt: Linear,
    pub w_ki: Linear,
    pub w_vi: Linear,
    pub lambda: f64,
    pub mode: AttentionMode,
    pub heads: usize,
}

#[derive(Clone, Debug)]
struct TermCache {
    sources: Vec<(Source, usize)>,
    k: Tensor,
    v: Tensor,
    weights: AttentionWeights,
    scale: f64,
}

/// Saved activations of one forward pass.
#[derive(Clone, Debug)]
pub struct CrossAttentionCache {
    x: Tensor,
    q: Tensor,
    bundle: ConditionBundle,
    terms: Vec<TermCache>,
}

impl CrossAttentionCache {
    /// Attention weights of every evaluated term, in term order. Terms with no
    /// keys or a zero scale are omitted.
    pub fn term_weights(&self) -> Vec<&AttentionWeights> {
        self.terms.iter().map(|t| &t.weights).collect()
    }
}

/// Gradients with respect to the layer inputs.
#[derive(Clone, Debug)]
pub struct CrossAttentionGrads {
    pub x: Tensor,
    pub grounding_text: Tensor,
    pub grounding_image: Tensor,
}

impl CrossAttentionLayer {
    /// Random `W_q, W_k, W_v`; the grounding projections start as copies of
    /// the prompt projections (rows beyond `d_text` of the image projections
    /// start at zero).
    pub fn new(name: &str, cfg: &CrossAttentionConfig, rng: &mut impl Rng) -> Self {
        let w_q = Linear::new(&format!("{name}.w_q"), cfg.d_model, cfg.d_h, false, rng);
        let w_k = Linear::new(&format!("{name}.w_k"), cfg.d_text, cfg.d_h, false, rng);
        let w_v = Linear::new(&format!("{name}.w_v"), cfg.d_text, cfg.d_h, false, rng);
        let w_kt = Linear::from_parts(&format!("{name}.w_kt"), w_k.weight.value.clone(), None);
        let w_vt = Linear::from_parts(&format!("{name}.w_vt"), w_v.weight.value.clone(), None);
        let w_ki = Linear::from_parts(&format!("{name}.w_ki"), embed_rows(&w_k.weight.value, cfg.d_img), None);
        let w_vi = Linear::from_parts(&format!("{name}.w_vi"), embed_rows(&w_v.weight.value, cfg.d_img), None);
        Self { w_q, w_k, w_v, w_kt, w_vt, w_ki, w_vi, lambda: cfg.lambda, mode: cfg.mode, heads: cfg.heads }
    }

    pub fn d_h(&self) -> usize {
        self.w_q.d_out()
    }

    /// Plain cross-attention over the prompt tokens.
    pub fn compute_ca(&self, x: &Tensor, text: &Tensor) -> Result<Tensor> {
        if text.rows() == 0 {
            return Err(Error::invalid("cross-attention needs at least one text token"));
        }
        let b = self.bundle_of(text, None, None);
        Ok(self.run(x, &b, &[TEXT])?.0)
    }

    /// Prompt attention plus a λ-scaled, separately normalized image term.
    pub fn compute_dca(&self, x: &Tensor, text: &Tensor, image: &Tensor) -> Result<Tensor> {
        check_lambda(self.lambda)?;
        let b = self.bundle_of(text, None, Some(image));
        Ok(self.run(x, &b, &[TEXT, IMAGE_SIDE])?.0)
    }

    /// One softmax over the prompt keys and the grounding-text keys.
    pub fn compute_cca(&self, x: &Tensor, text: &Tensor, grounding_text: &Tensor) -> Result<Tensor> {
        if text.rows() + grounding_text.rows() == 0 {
            return Err(Error::invalid("concatenated attention needs at least one key"));
        }
        let b = self.bundle_of(text, Some(grounding_text), None);
        Ok(self.run(x, &b, &[TEXT_AND_LAYOUT])?.0)
    }

    /// Concatenated attention plus the λ-scaled image term.
    pub fn compute_fca(&self, x: &Tensor, bundle: &ConditionBundle) -> Result<Tensor> {
        check_lambda(self.lambda)?;
        if bundle.text.rows() + bundle.grounding_text.rows() == 0 {
            return Err(Error::invalid("concatenated attention needs at least one key"));
        }
        Ok(self.run(x, bundle, &[TEXT_AND_LAYOUT, IMAGE_SIDE])?.0)
    }

    /// Forward pass in the layer's configured mode. An all-empty bundle yields
    /// a zero output.
    pub fn forward(&self, x: &Tensor, bundle: &ConditionBundle) -> Result<(Tensor, CrossAttentionCache)> {
        check_lambda(self.lambda)?;
        self.run(x, bundle, terms_for(self.mode))
    }

    fn bundle_of(&self, text: &Tensor, gt: Option<&Tensor>, gi: Option<&Tensor>) -> ConditionBundle {
        ConditionBundle {
            text: text.clone(),
            grounding_text: gt.cloned().unwrap_or_else(|| Tensor::empty_rows(self.w_kt.d_in())),
            grounding_image: gi.cloned().unwrap_or_else(|| Tensor::empty_rows(self.w_ki.d_in())),
        }
    }

    fn projections(&self, s: Source) -> (&Linear, &Linear) {
        match s {
            Source::Text => (&self.w_k, &self.w_v),
            Source::GroundingText => (&self.w_kt, &self.w_vt),
            Source::GroundingImage => (&self.w_ki, &self.w_vi),
        }
    }

    fn run(&self, x: &Tensor, bundle: &ConditionBundle, terms: &[Term]) -> Result<(Tensor, CrossAttentionCache)> {
        let q = self.w_q.forward(x)?;
        let mut out = Tensor::zeros(&[x.rows(), self.d_h()]);
        let mut caches = Vec::with_capacity(terms.len());
        for term in terms {
            let scale = if term.lambda_scaled { self.lambda } else { 1.0 };
            if scale == 0.0 {
                continue;
            }
            let mut k: Option<Tensor> = None;
            let mut v: Option<Tensor> = None;
            let mut sources = Vec::new();
            for &s in term.sources {
                let input = source_block(bundle, s);
                if input.rows() == 0 {
                    continue;
                }
                let (pk, pv) = self.projections(s);
                let (ks, vs) = (pk.forward(input)?, pv.forward(input)?);
                k = Some(match k {
                    None => ks,
                    Some(prev) => Tensor::concat_rows(&prev, &ks)?,
                });
                v = Some(match v {
                    None => vs,
                    Some(prev) => Tensor::concat_rows(&prev, &vs)?,
                });
                sources.push((s, input.rows()));
            }
            let (Some(k), Some(v)) = (k, v) else { continue };
            let (o, weights) = attend(&q, &k, &v, self.heads)?;
            if caches.is_empty() && scale == 1.0 {
                out = o;
            } else {
                out.axpy(scale, &o)?;
            }
            caches.push(TermCache { sources, k, v, weights, scale });
        }
        let cache = CrossAttentionCache { x: x.clone(), q, bundle: bundle.clone(), terms: caches };
        Ok((out, cache))
    }

    /// Accumulates weight gradients and returns input gradients.
    pub fn backward(&mut self, cache: &CrossAttentionCache, dout: &Tensor) -> Result<CrossAttentionGrads> {
        let mut dq = Tensor::zeros(cache.q.shape());
        let mut d_gt = Tensor::zeros(cache.bundle.grounding_text.shape());
        let mut d_gi = Tensor::zeros(cache.bundle.grounding_image.shape());
        for term in &cache.terms {
            let scaled;
            let d = if term.scale == 1.0 {
                dout
            } else {
                scaled = dout.scale(term.scale);
                &scaled
            };
            let (dq_t, dk, dv) = attend_backward(&cache.q, &term.k, &term.v, &term.weights, d)?;
            dq.add_assign(&dq_t)?;
            let mut row = 0;
            for &(s, n) in &term.sources {
                let dk_s = dk.slice_rows(row, row + n);
                let dv_s = dv.slice_rows(row, row + n);
                row += n;
                let input = source_block(&cache.bundle, s);
                let (pk, pv) = match s {
                    Source::Text => (&mut self.w_k, &mut self.w_v),
                    Source::GroundingText => (&mut self.w_kt, &mut self.w_vt),
                    Source::GroundingImage => (&mut self.w_ki, &mut self.w_vi),
                };
                match s {
                    // Prompt features come from a frozen encoder.
                    Source::Text => {
                        pk.backward_params(input, &dk_s);
                        pv.backward_params(input, &dv_s);
                    }
                    Source::GroundingText => {
                        d_gt.add_assign(&pk.backward(input, &dk_s)?)?;
                        d_gt.add_assign(&pv.backward(input, &dv_s)?)?;
                    }
                    Source::GroundingImage => {
                        d_gi.add_assign(&pk.backward(input, &dk_s)?)?;
                        d_gi.add_assign(&pv.backward(input, &dv_s)?)?;
                    }
                }
            }
        }
        let dx = self.w_q.backward(&cache.x, &dq)?;
        Ok(CrossAttentionGrads { x: dx, grounding_text: d_gt, grounding_image: d_gi })
    }
}

fn source_block(bundle: &ConditionBundle, s: Source) -> &Tensor {
    match s {
        Source::Text => &bundle.text,
        Source::GroundingText => &bundle.grounding_text,
        Source::GroundingImage => &bundle.grounding_image,
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::invalid(format!("λ = {lambda} outside [0, 1]")))
    }
}

/// Copies `src` into the top rows of a `rows × src.cols()` zero matrix.
fn embed_rows(src: &Tensor, rows: usize) -> Tensor {
    let mut out = Tensor::zeros(&[rows, src.cols()]);
    let n = rows.min(src.rows());
    out.data_mut()[..n * src.cols()].copy_from_slice(&src.data()[..n * src.cols()]);
    out
}

impl Module for CrossAttentionLayer {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for l in [&self.w_q, &self.w_k, &self.w_v, &self.w_kt, &self.w_vt, &self.w_ki, &self.w_vi] {
            l.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for l in [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_kt,
            &mut self.w_vt,
            &mut self.w_ki,
            &mut self.w_vi,
        ] {
            l.visit_params_mut(f);
        }
    }
}

#[cfg(test)]
mod tests;
