use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{ConditionBundle, CrossAttentionCache, CrossAttentionConfig, CrossAttentionLayer};
use crate::error::{Error, Result};
use crate::nn::activation::{silu_backward, silu_tensor};
use crate::nn::{attend, attend_backward, AttentionWeights, LayerNorm, LayerNormCache, Linear, Module, Parameter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Cross-attention settings; `cross.d_model` must equal `d_model`.
    pub cross: CrossAttentionConfig,
}

impl DenoiserConfig {
    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!("patch {} must divide image size {}", self.patch, self.image_size)));
        }
        if !self.d_model.is_multiple_of(2) || !self.d_model.is_multiple_of(self.heads) || !self.cross.d_h.is_multiple_of(self.cross.heads) {
            return Err(Error::Config("model widths must be even and divisible by the head count".into()));
        }
        if self.cross.d_model != self.d_model {
            return Err(Error::Config("cross-attention query width must equal d_model".into()));
        }
        Ok(())
    }
}

/// Pre-norm transformer block: self-attention, cross-attention, feed-forward.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub ln2: LayerNorm,
    pub cross: CrossAttentionLayer,
    pub cross_out: Linear,
    pub ln3: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl Block {
    fn new(name: &str, cfg: &DenoiserConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let n = |s: &str| format!("{name}.{s}");
        Self {
            ln1: LayerNorm::new(&n("ln1"), d),
            w_q: Linear::new(&n("self.w_q"), d, d, false, rng),
            w_k: Linear::new(&n("self.w_k"), d, d, false, rng),
            w_v: Linear::new(&n("self.w_v"), d, d, false, rng),
            w_o: Linear::new(&n("self.w_o"), d, d, true, rng),
            ln2: LayerNorm::new(&n("ln2"), d),
            cross: CrossAttentionLayer::new(&n("cross"), &cfg.cross, rng),
            cross_out: Linear::new(&n("cross_out"), cfg.cross.d_h, d, true, rng),
            ln3: LayerNorm::new(&n("ln3"), d),
            ff_in: Linear::new(&n("ff.0"), d, d * cfg.ff_mult, true, rng),
            ff_out: Linear::new(&n("ff.1"), d * cfg.ff_mult, d, true, rng),
        }
    }
}

impl Module for Block {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.ln1.visit_params(f);
        for l in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            l.visit_params(f);
        }
        self.ln2.visit_params(f);
        self.cross.visit_params(f);
        self.cross_out.visit_params(f);
        self.ln3.visit_params(f);
        self.ff_in.visit_params(f);
        self.ff_out.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.ln1.visit_params_mut(f);
        for l in [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o] {
            l.visit_params_mut(f);
        }
        self.ln2.visit_params_mut(f);
        self.cross.visit_params_mut(f);
        self.cross_out.visit_params_mut(f);
        self.ln3.visit_params_mut(f);
        self.ff_in.visit_params_mut(f);
        self.ff_out.visit_params_mut(f);
    }
}

#[derive(Clone, Debug)]
struct BlockCache {
    ln1: LayerNormCache,
    h1: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    self_weights: Vec<AttentionWeights>,
    attn: Tensor,
    ln2: LayerNormCache,
    cross: Vec<CrossAttentionCache>,
    cross_raw: Tensor,
    ln3: LayerNormCache,
    h3: Tensor,
    ff_pre: Tensor,
    ff_act: Tensor,
}

/// Saved activations of a batched forward pass.
#[derive(Clone, Debug)]
pub struct NetCache {
    batch: usize,
    patches: Tensor,
    t_sin: Tensor,
    t_pre: Tensor,
    t_act: Tensor,
    blocks: Vec<BlockCache>,
    ln_out: LayerNormCache,
    h_out: Tensor,
}

/// Gradients of the loss with respect to one sample's grounding tokens.
#[derive(Clone, Debug)]
pub struct GroundingGrads {
    pub text: Tensor,
    pub image: Tensor,
}

/// Patch-transformer noise predictor.
#[derive(Clone, Debug)]
pub struct DenoiserNet {
    pub config: DenoiserConfig,
    pub patch_embed: Linear,
    /// Fixed 2D sin-cos position table, `tokens × d_model`.
    pub pos: Tensor,
    pub time_in: Linear,
    pub time_out: Linear,
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
    pub head: Linear,
}

impl DenoiserNet {
    /// Random init with a zero output head, so a fresh net predicts zero noise.
    pub fn new(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let blocks = (0..config.blocks).map(|i| Block::new(&format!("denoiser.blocks.{i}"), &config, rng)).collect();
        Ok(Self {
            patch_embed: Linear::new("denoiser.patch_embed", config.patch_dim(), d, true, rng),
            pos: position_table(config.image_size / config.patch, d),
            time_in: Linear::new("denoiser.time.0", d, d, true, rng),
            time_out: Linear::new("denoiser.time.1", d, d, true, rng),
            blocks,
            ln_out: LayerNorm::new("denoiser.ln_out", d),
            head: Linear::zeros("denoiser.head", d, config.patch_dim(), true),
            config,
        })
    }

    pub fn set_mode(&mut self, mode: crate::attention::AttentionMode) {
        self.config.cross.mode = mode;
        self.blocks.iter_mut().for_each(|b| b.cross.mode = mode);
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.config.cross.lambda = lambda;
        self.blocks.iter_mut().for_each(|b| b.cross.lambda = lambda);
    }

    /// Predicts the noise of every image in `x` (`B × pixels`, row-major HWC).
    pub fn forward(&self, x: &Tensor, t: &[usize], bundles: &[&ConditionBundle]) -> Result<(Tensor, NetCache)> {
        let cfg = &self.config;
        let b = x.rows();
        if x.cols() != cfg.pixels() || t.len() != b || bundles.len() != b {
            return Err(Error::shape(format!(
                "batch of {} images with {} values, {} timesteps, {} bundles (expected {} values)",
                b,
                x.cols(),
                t.len(),
                bundles.len(),
                cfg.pixels()
            )));
        }
        for bundle in bundles {
            bundle.validate(cfg.cross.d_text, cfg.cross.d_img)?;
        }
        let n_tok = cfg.tokens();
        let patches = patchify(x, cfg.image_size, cfg.patch);
        let mut h = self.patch_embed.forward(&patches)?;
        let t_sin = timestep_table(t, cfg.d_model);
        let t_pre = self.time_in.forward(&t_sin)?;
        let t_act = silu_tensor(&t_pre);
        let temb = self.time_out.forward(&t_act)?;
        for s in 0..b {
            for i in 0..n_tok {
                let row = h.row_mut(s * n_tok + i);
                for ((o, p), e) in row.iter_mut().zip(self.pos.row(i)).zip(temb.row(s)) {
                    *o += p + e;
                }
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, c) = self.block_forward(block, &h, bundles)?;
            caches.push(c);
            h = next;
        }
        let (h_out, ln_out) = self.ln_out.forward(&h)?;
        let out = self.head.forward(&h_out)?;
        let eps = unpatchify(&out, b, cfg.image_size, cfg.patch);
        eps.ensure_finite("noise prediction")?;
        Ok((eps, NetCache { batch: b, patches, t_sin, t_pre, t_act, blocks: caches, ln_out, h_out }))
    }

    fn block_forward(&self, blk: &Block, x: &Tensor, bundles: &[&ConditionBundle]) -> Result<(Tensor, BlockCache)> {
        let n_tok = self.config.tokens();
        let (h1, ln1) = blk.ln1.forward(x)?;
        let q = blk.w_q.forward(&h1)?;
        let k = blk.w_k.forward(&h1)?;
        let v = blk.w_v.forward(&h1)?;
        let mut attn = Tensor::zeros(q.shape());
        let mut self_weights = Vec::with_capacity(bundles.len());
        for s in 0..bundles.len() {
            let (r0, r1) = (s * n_tok, (s + 1) * n_tok);
            let (o, w) = attend(&q.slice_rows(r0, r1), &k.slice_rows(r0, r1), &v.slice_rows(r0, r1), self.config.heads)?;
            attn.data_mut()[r0 * o.cols()..r1 * o.cols()].copy_from_slice(o.data());
            self_weights.push(w);
        }
        let x1 = x.add(&blk.w_o.forward(&attn)?)?;

        let (h2, ln2) = blk.ln2.forward(&x1)?;
        let d_h = blk.cross.d_h();
        let mut cross_raw = Tensor::zeros(&[x.rows(), d_h]);
        let mut cross = Vec::with_capacity(bundles.len());
        for (s, bundle) in bundles.iter().enumerate() {
            let (r0, r1) = (s * n_tok, (s + 1) * n_tok);
            let (o, c) = blk.cross.forward(&h2.slice_rows(r0, r1), bundle)?;
            cross_raw.data_mut()[r0 * d_h..r1 * d_h].copy_from_slice(o.data());
            cross.push(c);
        }
        let x2 = x1.add(&blk.cross_out.forward(&cross_raw)?)?;

        let (h3, ln3) = blk.ln3.forward(&x2)?;
        let ff_pre = blk.ff_in.forward(&h3)?;
        let ff_act = silu_tensor(&ff_pre);
        let x3 = x2.add(&blk.ff_out.forward(&ff_act)?)?;
        let cache = BlockCache { ln1, h1, q, k, v, self_weights, attn, ln2, cross, cross_raw, ln3, h3, ff_pre, ff_act };
        Ok((x3, cache))
    }

    /// Accumulates parameter gradients from `d_eps` (`B × pixels`) and returns
    /// the gradient with respect to each sample's grounding tokens.
    pub fn backward(&mut self, cache: &NetCache, d_eps: &Tensor) -> Result<Vec<GroundingGrads>> {
        let cfg = self.config;
        let b = cache.batch;
        let n_tok = cfg.tokens();
        let d_out = patchify(d_eps, cfg.image_size, cfg.patch);
        let d_hout = self.head.backward(&cache.h_out, &d_out)?;
        let mut d = self.ln_out.backward(&cache.ln_out, &d_hout)?;

        let mut grads: Vec<GroundingGrads> = (0..b)
            .map(|_| GroundingGrads {
                text: Tensor::empty_rows(cfg.cross.d_text),
                image: Tensor::empty_rows(cfg.cross.d_img),
            })
            .collect();
        for (blk, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = block_backward(blk, c, &d, n_tok, &mut grads)?;
        }

        let mut d_temb = Tensor::zeros(&[b, cfg.d_model]);
        for s in 0..b {
            let acc = d_temb.row_mut(s);
            for i in 0..n_tok {
                for (a, g) in acc.iter_mut().zip(d.row(s * n_tok + i)) {
                    *a += g;
                }
            }
        }
        self.patch_embed.backward_params(&cache.patches, &d);
        let d_act = self.time_out.backward(&cache.t_act, &d_temb)?;
        let d_pre = silu_backward(&cache.t_pre, &d_act);
        self.time_in.backward_params(&cache.t_sin, &d_pre);
        Ok(grads)
    }
}

fn add_into(acc: &mut Tensor, g: &Tensor) -> Result<()> {
    if acc.rows() == 0 {
        *acc = g.clone();
        Ok(())
    } else {
        acc.add_assign(g)
    }
}

fn block_backward(
    blk: &mut Block,
    c: &BlockCache,
    d_x3: &Tensor,
    n_tok: usize,
    grads: &mut [GroundingGrads],
) -> Result<Tensor> {
    let d_act = blk.ff_out.backward(&c.ff_act, d_x3)?;
    let d_pre = silu_backward(&c.ff_pre, &d_act);
    let d_h3 = blk.ff_in.backward(&c.h3, &d_pre)?;
    let d_x2 = d_x3.add(&blk.ln3.backward(&c.ln3, &d_h3)?)?;

    let d_raw = blk.cross_out.backward(&c.cross_raw, &d_x2)?;
    let d_model = d_x2.cols();
    let mut d_h2 = Tensor::zeros(d_x2.shape());
    for (s, cc) in c.cross.iter().enumerate() {
        let (r0, r1) = (s * n_tok, (s + 1) * n_tok);
        let g = blk.cross.backward(cc, &d_raw.slice_rows(r0, r1))?;
        d_h2.data_mut()[r0 * d_model..r1 * d_model].copy_from_slice(g.x.data());
        add_into(&mut grads[s].text, &g.grounding_text)?;
        add_into(&mut grads[s].image, &g.grounding_image)?;
    }
    let d_x1 = d_x2.add(&blk.ln2.backward(&c.ln2, &d_h2)?)?;

    let d_attn = blk.w_o.backward(&c.attn, &d_x1)?;
    let mut dq = Tensor::zeros(c.q.shape());
    let mut dk = Tensor::zeros(c.k.shape());
    let mut dv = Tensor::zeros(c.v.shape());
    for (s, w) in c.self_weights.iter().enumerate() {
        let (r0, r1) = (s * n_tok, (s + 1) * n_tok);
        let (gq, gk, gv) = attend_backward(
            &c.q.slice_rows(r0, r1),
            &c.k.slice_rows(r0, r1),
            &c.v.slice_rows(r0, r1),
            w,
            &d_attn.slice_rows(r0, r1),
        )?;
        dq.data_mut()[r0 * d_model..r1 * d_model].copy_from_slice(gq.data());
        dk.data_mut()[r0 * d_model..r1 * d_model].copy_from_slice(gk.data());
        dv.data_mut()[r0 * d_model..r1 * d_model].copy_from_slice(gv.data());
    }
    let mut d_h1 = blk.w_q.backward(&c.h1, &dq)?;
    d_h1.add_assign(&blk.w_k.backward(&c.h1, &dk)?)?;
    d_h1.add_assign(&blk.w_v.backward(&c.h1, &dv)?)?;
    d_x1.add(&blk.ln1.backward(&c.ln1, &d_h1)?)
}

impl Module for DenoiserNet {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.patch_embed.visit_params(f);
        self.time_in.visit_params(f);
        self.time_out.visit_params(f);
        self.blocks.visit_params(f);
        self.ln_out.visit_params(f);
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.patch_embed.visit_params_mut(f);
        self.time_in.visit_params_mut(f);
        self.time_out.visit_params_mut(f);
        self.blocks.visit_params_mut(f);
        self.ln_out.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
}

/// `B × (H·W·3)` images to `(B·tokens) × (p·p·3)` patch rows, tokens in
/// raster order and each patch flattened as (row, column, channel).
pub fn patchify(x: &Tensor, size: usize, p: usize) -> Tensor {
    let g = size / p;
    let pd = p * p * 3;
    let mut out = Tensor::zeros(&[x.rows() * g * g, pd]);
    for s in 0..x.rows() {
        let img = x.row(s);
        for gy in 0..g {
            for gx in 0..g {
                let row = out.row_mut((s * g + gy) * g + gx);
                for dy in 0..p {
                    let src = ((gy * p + dy) * size + gx * p) * 3;
                    row[dy * p * 3..(dy + 1) * p * 3].copy_from_slice(&img[src..src + p * 3]);
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, batch: usize, size: usize, p: usize) -> Tensor {
    let g = size / p;
    let mut out = Tensor::zeros(&[batch, size * size * 3]);
    for s in 0..batch {
        let img = out.row_mut(s);
        for gy in 0..g {
            for gx in 0..g {
                let row = patches.row((s * g + gy) * g + gx);
                for dy in 0..p {
                    let dst = ((gy * p + dy) * size + gx * p) * 3;
                    img[dst..dst + p * 3].copy_from_slice(&row[dy * p * 3..(dy + 1) * p * 3]);
                }
            }
        }
    }
    out
}

/// Sinusoidal embedding of each timestep, `len(t) × d`.
pub fn timestep_table(t: &[usize], d: usize) -> Tensor {
    let half = d / 2;
    let mut out = Tensor::zeros(&[t.len(), d]);
    for (r, &ts) in t.iter().enumerate() {
        let row = out.row_mut(r);
        for i in 0..half {
            let f = (-(10000f64).ln() * i as f64 / half as f64).exp();
            row[i] = (ts as f64 * f).sin();
            row[half + i] = (ts as f64 * f).cos();
        }
    }
    out
}

/// 2D sin-cos position table for a `g × g` token grid: the first half of the
/// features encodes the column, the second half the row.
pub fn position_table(g: usize, d: usize) -> Tensor {
    let quarter = d / 4;
    let mut out = Tensor::zeros(&[g * g, d]);
    for gy in 0..g {
        for gx in 0..g {
            let row = out.row_mut(gy * g + gx);
            for (axis, pos) in [(0, gx), (1, gy)] {
                for i in 0..quarter {
                    let f = (-(10000f64).ln() * i as f64 / quarter.max(1) as f64).exp();
                    let base = axis * d / 2;
                    row[base + i] = (pos as f64 * f).sin();
                    row[base + quarter + i] = (pos as f64 * f).cos();
                }
            }
        }
    }
    out
}
