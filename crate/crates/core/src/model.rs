//! The trainable model: the denoiser, the grounding module and the frozen toy
//! encoders, plus the glue that turns scenes into conditioning bundles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, ConditionBundle, CrossAttentionConfig};
use crate::denoiser::{
    noise_mse, sample_images, DenoiserConfig, DenoiserNet, DiffusionSchedule, SampleOutput, SamplerConfig, ScheduleConfig,
};
use crate::error::{Error, Result};
use crate::grounding::{
    pad_and_dropout, GroundingCache, GroundingConfig, GroundingModule, ImageGroundingStyle, PaddedConditions,
    SubjectCondition, DEFAULT_FREQ_COUNT,
};
use crate::nn::{Module, Parameter, Tensor};
use crate::world::{Image, Scene, SubjectSpec, ToyEncoders, CANVAS, PATCH_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub grounding: GroundingConfig,
    pub schedule: ScheduleConfig,
    pub encoder_seed: u64,
}

impl ModelConfig {
    /// A 32×32 pixel model with the given transformer width and depth.
    pub fn with_dims(d_model: usize, blocks: usize, heads: usize, d_text: usize) -> Self {
        let d_img = PATCH_DIM;
        Self {
            denoiser: DenoiserConfig {
                image_size: CANVAS,
                patch: 4,
                d_model,
                blocks,
                heads,
                ff_mult: 2,
                cross: CrossAttentionConfig {
                    d_model,
                    d_text,
                    d_img,
                    d_h: d_model,
                    heads,
                    lambda: 0.8,
                    mode: AttentionMode::Ca,
                },
            },
            grounding: GroundingConfig {
                d_text,
                d_img,
                freq_count: DEFAULT_FREQ_COUNT,
                mlp_hidden: d_model,
                resampler_depth: 1,
                resampler_ff_mult: 2,
                style: ImageGroundingStyle::Additive,
            },
            schedule: ScheduleConfig::default(),
            encoder_seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        let (c, g) = (&self.denoiser.cross, &self.grounding);
        if c.d_text != g.d_text || c.d_img != g.d_img {
            return Err(Error::Config("grounding widths must match the cross-attention widths".into()));
        }
        if g.d_img != PATCH_DIM {
            return Err(Error::Config(format!("image token width must be {PATCH_DIM} (the reference encoder width)")));
        }
        if self.denoiser.image_size != CANVAS {
            return Err(Error::Config(format!("the denoiser works on {CANVAS}×{CANVAS} canvases")));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_dims(64, 4, 4, 32)
    }
}

/// Attention mode plus which grounding blocks are fed to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conditioning {
    pub mode: AttentionMode,
    pub use_text: bool,
    pub use_image: bool,
}

impl Conditioning {
    pub const TEXT_ONLY: Conditioning = Conditioning { mode: AttentionMode::Ca, use_text: false, use_image: false };

    pub fn want_text(&self) -> bool {
        self.use_text && self.mode.uses_grounding_text()
    }

    pub fn want_image(&self) -> bool {
        self.use_image && self.mode.uses_grounding_image()
    }
}

/// One training example: a scene and the seed of its timestep, noise and
/// dropout draws.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub scene: &'a Scene,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct MuseModel {
    pub config: ModelConfig,
    pub net: DenoiserNet,
    pub grounding: GroundingModule,
    pub encoders: ToyEncoders,
    pub schedule: DiffusionSchedule,
    conditioning: Conditioning,
}

impl MuseModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = DenoiserNet::new(config.denoiser, &mut rng)?;
        let grounding = GroundingModule::new(config.grounding, &mut rng);
        let mut model = Self {
            config,
            net,
            grounding,
            encoders: ToyEncoders::new(config.encoder_seed, config.grounding.d_text),
            schedule: DiffusionSchedule::new(config.schedule)?,
            conditioning: Conditioning::TEXT_ONLY,
        };
        model.set_conditioning(Conditioning { mode: config.denoiser.cross.mode, use_text: false, use_image: false });
        Ok(model)
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    pub fn set_conditioning(&mut self, c: Conditioning) {
        self.conditioning = c;
        self.net.set_mode(c.mode);
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.net.set_lambda(lambda);
    }

    /// Subject conditions of a scene, using crops of its own canvas as the
    /// reference images.
    pub fn subject_conditions(&self, scene: &Scene) -> Result<Vec<SubjectCondition>> {
        self.conditions_with_references(&scene.subjects, &scene.canvas)
    }

    /// Subject conditions whose references are cropped from `source` at each
    /// subject's box.
    pub fn conditions_with_references(&self, subjects: &[SubjectSpec], source: &Image) -> Result<Vec<SubjectCondition>> {
        subjects
            .iter()
            .map(|s| {
                let crop = source.crop(&s.bbox)?;
                let (patch_tokens, _) = self.encoders.encode_reference(&crop)?;
                Ok(SubjectCondition { class_feature: self.encoders.class_feature(s.class), patch_tokens, bbox: s.bbox })
            })
            .collect()
    }

    /// Conditioning bundle for a prompt and padded subject slots under the
    /// current conditioning.
    pub fn bundle(&self, prompt: &[u32], conds: &PaddedConditions) -> Result<(ConditionBundle, GroundingCache)> {
        let c = self.conditioning;
        let text =
            if conds.caption_dropped { Tensor::empty_rows(self.encoders.d_text()) } else { self.encoders.encode_prompt(prompt)? };
        let (tokens, cache) = self.grounding.forward(conds, c.want_text(), c.want_image())?;
        Ok((ConditionBundle { text, grounding_text: tokens.text, grounding_image: tokens.image }, cache))
    }

    /// The unconditional bundle: caption dropped and every slot empty, the
    /// same representation training dropout produces.
    pub fn uncond_bundle(&self) -> Result<ConditionBundle> {
        Ok(self.bundle(&[], &PaddedConditions::all_empty(true))?.0)
    }

    /// Bundle with every subject of the scene present and the caption kept.
    pub fn scene_bundle(&self, scene: &Scene) -> Result<ConditionBundle> {
        let conds = pad_and_dropout(&self.subject_conditions(scene)?, 0.0, 0)?;
        Ok(self.bundle(&scene.prompt_tokens, &conds)?.0)
    }

    /// Draws the timestep, noise and dropout seed of one training example.
    fn draws(&self, seed: u64) -> (usize, Vec<f64>, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.gen_range(0..self.schedule.timesteps());
        let dropout_seed = rng.gen::<u64>();
        let noise = (0..self.config.denoiser.pixels()).map(|_| StandardNormal.sample(&mut rng)).collect();
        (t, noise, dropout_seed)
    }

    /// Noise-prediction MSE of a batch. With `backward`, gradients of the
    /// batch loss are accumulated into every unfrozen parameter.
    pub fn batch_loss(&mut self, items: &[TrainItem<'_>], p_drop: f64, backward: bool) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let mut rows = Vec::with_capacity(items.len());
        let mut targets = Vec::with_capacity(items.len());
        let mut ts = Vec::with_capacity(items.len());
        let mut bundles = Vec::with_capacity(items.len());
        let mut caches = Vec::with_capacity(items.len());
        for item in items {
            let (t, noise, dseed) = self.draws(item.seed);
            let conds = pad_and_dropout(&self.subject_conditions(item.scene)?, p_drop, dseed)?;
            let (bundle, cache) = self.bundle(&item.scene.prompt_tokens, &conds)?;
            rows.push(self.schedule.q_sample(&item.scene.canvas.to_signed(), t, &noise)?);
            targets.push(noise);
            ts.push(t);
            bundles.push(bundle);
            caches.push(cache);
        }
        let x = Tensor::from_rows(&rows)?;
        let target = Tensor::from_rows(&targets)?;
        let refs: Vec<&ConditionBundle> = bundles.iter().collect();
        let (pred, net_cache) = self.net.forward(&x, &ts, &refs)?;
        let (loss, d_pred) = noise_mse(&pred, &target)?;
        if backward {
            let grads = self.net.backward(&net_cache, &d_pred)?;
            if self.grounding.any_requires_grad() {
                for (g, cache) in grads.iter().zip(&caches) {
                    self.grounding.backward(cache, &g.text, &g.image)?;
                }
            }
        }
        Ok(loss)
    }

    /// Loss of a single scene under a seeded timestep, noise and dropout draw.
    pub fn training_loss(&mut self, scene: &Scene, seed: u64, p_drop: f64) -> Result<f64> {
        self.batch_loss(&[TrainItem { scene, seed }], p_drop, false)
    }

    /// Samples one image per scene, conditioned on the scene's prompt, boxes
    /// and reference crops.
    pub fn generate(&self, scenes: &[&Scene], sampler: &SamplerConfig, seeds: &[u64]) -> Result<SampleOutput> {
        let bundles = scenes.iter().map(|s| self.scene_bundle(s)).collect::<Result<Vec<_>>>()?;
        sample_images(&self.net, &self.schedule, &bundles, &self.uncond_bundle()?, sampler, seeds)
    }
}

impl Module for MuseModel {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.net.visit_params(f);
        self.grounding.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.net.visit_params_mut(f);
        self.grounding.visit_params_mut(f);
    }
}
