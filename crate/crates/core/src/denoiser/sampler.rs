use std::borrow::Cow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::net::DenoiserNet;
use super::schedule::{cfg_combine, DiffusionSchedule};
use crate::attention::ConditionBundle;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::world::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_weight: f64,
    /// Only the deterministic sampler (η = 0) is implemented.
    pub eta: f64,
    pub lambda: f64,
    /// Clamp each step's clean-image estimate to the pixel range. Off by
    /// default: pixels are then clamped once, at the end.
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 30, cfg_weight: 7.5, eta: 0.0, lambda: 0.8, clip_x0: false }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.cfg_weight >= 0.0) {
            return Err(Error::Config(format!("guidance weight {} must be non-negative", self.cfg_weight)));
        }
        if self.eta != 0.0 {
            return Err(Error::Config("only η = 0 sampling is supported".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("λ = {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Sampled images plus the number of network evaluations spent per image.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub images: Vec<Image>,
    pub evals_per_image: usize,
}

/// Initial noise of the trajectory seeded by `seed`.
pub fn initial_noise(seed: u64, pixels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..pixels).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// DDIM sampling with classifier-free guidance for a batch of conditions,
/// one seed per image. `uncond` is the dropped-condition bundle; its pass is
/// the only one when the guidance weight is zero.
pub fn sample_images(
    net: &DenoiserNet,
    schedule: &DiffusionSchedule,
    bundles: &[ConditionBundle],
    uncond: &ConditionBundle,
    cfg: &SamplerConfig,
    seeds: &[u64],
) -> Result<SampleOutput> {
    cfg.validate()?;
    if bundles.len() != seeds.len() {
        return Err(Error::invalid("one seed per sampled image is required"));
    }
    let net: Cow<DenoiserNet> = if net.config.cross.lambda == cfg.lambda {
        Cow::Borrowed(net)
    } else {
        let mut n = net.clone();
        n.set_lambda(cfg.lambda);
        Cow::Owned(n)
    };
    let nc = &net.config;
    let n = bundles.len();
    let pixels = nc.pixels();
    let guided = cfg.cfg_weight != 0.0;

    let mut xs: Vec<Vec<f64>> = seeds.iter().map(|&s| initial_noise(s, pixels)).collect();
    let mut evals = 0;
    let timesteps = schedule.ddim_timesteps(cfg.steps)?;
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied();
        let mut rows: Vec<Vec<f64>> = xs.clone();
        let mut conds: Vec<&ConditionBundle> = vec![uncond; n];
        if guided {
            rows.extend(xs.iter().cloned());
            conds.extend(bundles.iter());
        }
        let batch = Tensor::from_rows(&rows)?;
        let ts = vec![t; rows.len()];
        let (eps, _) = net.forward(&batch, &ts, &conds)?;
        evals += if guided { 2 } else { 1 };
        for (k, x) in xs.iter_mut().enumerate() {
            let e = if guided {
                cfg_combine(eps.row(k), eps.row(n + k), cfg.cfg_weight)?
            } else {
                eps.row(k).to_vec()
            };
            *x = schedule.ddim_step(x, &e, t, t_prev, cfg.clip_x0)?;
        }
    }
    let images = xs
        .iter()
        .map(|x| Image::from_signed(nc.image_size, nc.image_size, x))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleOutput { images, evals_per_image: evals })
}

/// Single-image wrapper around [`sample_images`] whose unconditional pass
/// uses an all-empty bundle.
pub fn sample_image(
    net: &DenoiserNet,
    schedule: &DiffusionSchedule,
    bundle: &ConditionBundle,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<(Image, usize)> {
    let uncond = ConditionBundle::empty(net.config.cross.d_text, net.config.cross.d_img);
    let out = sample_images(net, schedule, std::slice::from_ref(bundle), &uncond, cfg, &[seed])?;
    Ok((out.images.into_iter().next().expect("one image"), out.evals_per_image))
}
