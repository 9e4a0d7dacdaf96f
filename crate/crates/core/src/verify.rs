//! Finite-difference gradient suite over every trainable component at
//! small widths (all model dimensions at most 8).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AttentionMode, ConditionBundle, CrossAttentionConfig, CrossAttentionLayer};
use crate::denoiser::{noise_mse, DenoiserConfig, DenoiserNet};
use crate::error::Result;
use crate::grounding::{
    pad_and_dropout, BoundingBox, GroundingConfig, GroundingModule, ImageGroundingStyle, SubjectCondition,
};
use crate::model::{Conditioning, ModelConfig, MuseModel, TrainItem};
use crate::nn::param::normal_tensor;
use crate::nn::{finite_diff_gradcheck, GradcheckConfig, Module, Parameter, Tensor};
use crate::trainer::{group_of, ParamGroup};
use crate::world::{generate_scene, LayoutMode, Split};

/// Relative-error bound every case must meet.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckEntry {
    pub case: String,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

impl GradcheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// A cross-attention layer whose inputs are parameters too, so that the
/// input gradients feeding the grounding module are checked as well.
struct AttentionCase {
    layer: CrossAttentionLayer,
    x: Parameter,
    text: Tensor,
    grounding_text: Parameter,
    grounding_image: Parameter,
    probe: Tensor,
}

impl Module for AttentionCase {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.layer.visit_params(f);
        f(&self.x);
        f(&self.grounding_text);
        f(&self.grounding_image);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.layer.visit_params_mut(f);
        f(&mut self.x);
        f(&mut self.grounding_text);
        f(&mut self.grounding_image);
    }
}

fn attention_case(mode: AttentionMode) -> Result<GradcheckEntry> {
    let cfg = CrossAttentionConfig { d_model: 6, d_text: 5, d_img: 4, d_h: 8, heads: 2, lambda: 0.8, mode };
    let mut r = rng(3);
    let mut case = AttentionCase {
        layer: CrossAttentionLayer::new("attn", &cfg, &mut r),
        x: Parameter::new("x", normal_tensor(&mut r, &[3, 6], 1.0)),
        text: normal_tensor(&mut r, &[4, 5], 1.0),
        grounding_text: Parameter::new("g_t", normal_tensor(&mut r, &[2, 5], 1.0)),
        grounding_image: Parameter::new("g_i", normal_tensor(&mut r, &[8, 4], 1.0)),
        probe: normal_tensor(&mut r, &[3, 8], 1.0),
    };
    // Decouple the grounding projections from their copied initial values.
    case.layer.visit_params_mut(&mut |p| p.value = normal_tensor(&mut r, p.shape(), 0.5));
    let report = finite_diff_gradcheck(
        &mut case,
        |c, backward| {
            let bundle = ConditionBundle {
                text: c.text.clone(),
                grounding_text: c.grounding_text.value.clone(),
                grounding_image: c.grounding_image.value.clone(),
            };
            let (out, cache) = c.layer.forward(&c.x.value, &bundle)?;
            if backward {
                let g = c.layer.backward(&cache, &c.probe)?;
                c.x.accumulate(&g.x)?;
                if g.grounding_text.rows() > 0 {
                    c.grounding_text.accumulate(&g.grounding_text)?;
                }
                if g.grounding_image.rows() > 0 {
                    c.grounding_image.accumulate(&g.grounding_image)?;
                }
            }
            Ok(dot(&out, &c.probe))
        },
        GradcheckConfig::default(),
    )?;
    Ok(entry(format!("attention/{mode:?}"), report))
}

fn entry(case: String, r: crate::nn::GradcheckReport) -> GradcheckEntry {
    GradcheckEntry { case, max_rel_error: r.max_rel_error, worst: r.worst, coordinates: r.coordinates }
}

fn grounding_case(style: ImageGroundingStyle) -> Result<GradcheckEntry> {
    let cfg = GroundingConfig { d_text: 6, d_img: 4, freq_count: 2, mlp_hidden: 8, resampler_depth: 1, resampler_ff_mult: 2, style };
    let mut r = rng(5);
    let mut module = GroundingModule::new(cfg, &mut r);
    let boxes = [BoundingBox::new(0.1, 0.2, 0.4, 0.7)?, BoundingBox::new(0.5, 0.05, 0.95, 0.3)?];
    let subjects: Vec<SubjectCondition> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| SubjectCondition {
            class_feature: normal_tensor(&mut r, &[6], 1.0).into_data(),
            patch_tokens: normal_tensor(&mut r, &[3 + i, 4], 1.0),
            bbox: *b,
        })
        .collect();
    let conds = pad_and_dropout(&subjects, 0.0, 0)?;
    let probe_t = normal_tensor(&mut r, &[10, 6], 1.0);
    let probe_i = normal_tensor(&mut r, &[40, 4], 1.0);
    let report = finite_diff_gradcheck(
        &mut module,
        |m, backward| {
            let (tokens, cache) = m.forward(&conds, true, true)?;
            if backward {
                m.backward(&cache, &probe_t, &probe_i)?;
            }
            Ok(dot(&tokens.text, &probe_t) + dot(&tokens.image, &probe_i))
        },
        GradcheckConfig::default(),
    )?;
    Ok(entry(format!("grounding/{style:?}"), report))
}

fn denoiser_case() -> Result<GradcheckEntry> {
    let cross = CrossAttentionConfig { d_model: 8, d_text: 5, d_img: 4, d_h: 8, heads: 2, lambda: 0.8, mode: AttentionMode::Fca };
    let cfg = DenoiserConfig { image_size: 8, patch: 4, d_model: 8, blocks: 1, heads: 2, ff_mult: 2, cross };
    let mut r = rng(9);
    let mut net = DenoiserNet::new(cfg, &mut r)?;
    net.visit_params_mut(&mut |p| p.value = normal_tensor(&mut r, p.shape(), 0.4));
    let bundles = [
        ConditionBundle {
            text: normal_tensor(&mut r, &[3, 5], 1.0),
            grounding_text: normal_tensor(&mut r, &[2, 5], 1.0),
            grounding_image: normal_tensor(&mut r, &[8, 4], 1.0),
        },
        ConditionBundle::empty(5, 4),
    ];
    let x = normal_tensor(&mut r, &[2, cfg.pixels()], 1.0);
    let target = normal_tensor(&mut r, &[2, cfg.pixels()], 1.0);
    let report = finite_diff_gradcheck(
        &mut net,
        |n, backward| {
            let (pred, cache) = n.forward(&x, &[17, 640], &[&bundles[0], &bundles[1]])?;
            let (loss, d) = noise_mse(&pred, &target)?;
            if backward {
                n.backward(&cache, &d)?;
            }
            Ok(loss)
        },
        GradcheckConfig::default(),
    )?;
    Ok(entry("denoiser/1-block".into(), report))
}

/// End-to-end training loss through the grounding path: layout and subject
/// projections, grounding MLPs and empty tokens of a 1-block model. The
/// resampler (checked on its own above) and the base are held fixed.
fn model_case() -> Result<GradcheckEntry> {
    let mut cfg = ModelConfig::with_dims(8, 1, 2, 8);
    cfg.grounding.mlp_hidden = 8;
    let mut model = MuseModel::new(cfg, 4)?;
    let mut r = rng(12);
    model.visit_params_mut(&mut |p| p.value = normal_tensor(&mut r, p.shape(), 0.3));
    model.set_conditioning(Conditioning { mode: AttentionMode::Fca, use_text: true, use_image: true });
    model.set_frozen_by(&|name| group_of(name) == ParamGroup::Base || name.starts_with("grounding.resampler."));
    let scenes = [generate_scene(1, 2, LayoutMode::Uniform, Split::Train)?, generate_scene(2, 3, LayoutMode::Uniform, Split::Train)?];
    let report = finite_diff_gradcheck(
        &mut model,
        |m, backward| {
            let items = [TrainItem { scene: &scenes[0], seed: 3 }, TrainItem { scene: &scenes[1], seed: 4 }];
            m.batch_loss(&items, 0.0, backward)
        },
        GradcheckConfig::default(),
    )?;
    Ok(entry("model/grounding-path".into(), report))
}

/// Runs every case.
pub fn gradient_suite() -> Result<Vec<GradcheckEntry>> {
    let mut out = Vec::new();
    for mode in [AttentionMode::Ca, AttentionMode::DcaLayout, AttentionMode::Cca, AttentionMode::Fca] {
        out.push(attention_case(mode)?);
    }
    for style in [ImageGroundingStyle::Additive, ImageGroundingStyle::Concatenated] {
        out.push(grounding_case(style)?);
    }
    out.push(denoiser_case()?);
    out.push(model_case()?);
    Ok(out)
}
