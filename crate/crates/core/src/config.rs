//! Run configuration: a plain-text `key = value` file. Later sources win
//! over earlier ones (defaults, then the file, then command-line flags) and
//! unknown keys are rejected. [`RunConfig::to_text`] writes the resolved
//! form that every run archives next to its outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::{SamplerConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::eval::Thresholds;
use crate::grounding::ImageGroundingStyle;
use crate::model::ModelConfig;
use crate::trainer::{Stage, Strategy, TrainConfig};
use crate::world::LayoutMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_text: usize,
    pub resampler_depth: usize,
    pub grounding_style: ImageGroundingStyle,
    pub encoder_seed: u64,

    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    pub cfg_weight: f64,
    pub lambda: f64,
    pub clip_x0: bool,

    pub pretrain_steps: u64,
    pub stage_steps: u64,
    pub pretrain_lr: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub p_drop: f64,
    pub log_every: u64,
    pub cosine_decay: bool,
    pub strategy: Strategy,
    pub stage: Stage,
    pub train_layout: LayoutMode,

    pub seed: u64,
    pub eval_seeds: Vec<u64>,
    pub eval_per_level: usize,
    pub dataset_scenes: usize,
    /// Fixed identity thresholds; calibrated when absent.
    pub theta_lo: Option<f64>,
    pub theta_hi: Option<f64>,
    pub calibration_scenes: usize,
    pub calibration_seed: u64,

    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sampler = SamplerConfig::default();
        let schedule = ScheduleConfig::default();
        let train = TrainConfig::default();
        Self {
            d_model: 64,
            blocks: 4,
            heads: 4,
            d_text: 32,
            resampler_depth: 1,
            grounding_style: ImageGroundingStyle::Additive,
            encoder_seed: 7,
            timesteps: schedule.timesteps,
            beta_start: schedule.beta_start,
            beta_end: schedule.beta_end,
            sample_steps: sampler.steps,
            cfg_weight: sampler.cfg_weight,
            lambda: sampler.lambda,
            clip_x0: sampler.clip_x0,
            pretrain_steps: 20_000,
            stage_steps: train.steps,
            pretrain_lr: train.lr,
            lr: train.lr,
            weight_decay: train.weight_decay,
            batch_size: train.batch_size,
            p_drop: train.p_drop,
            log_every: train.log_every,
            cosine_decay: train.cosine_decay,
            strategy: train.strategy,
            stage: train.stage,
            train_layout: LayoutMode::Uniform,
            seed: 0,
            eval_seeds: vec![0, 1, 2, 3, 4],
            eval_per_level: 20,
            dataset_scenes: 1000,
            theta_lo: None,
            theta_hi: None,
            calibration_scenes: 500,
            calibration_seed: 99,
            out: PathBuf::from("runs"),
            checkpoint: None,
            dataset: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "" | "none" | "auto" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<u64>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_stage(value: &str) -> Result<Stage> {
    value.parse().map_err(|_| Error::Config(format!("`stage`: unknown stage `{value}`")))
}

fn style_name(s: ImageGroundingStyle) -> &'static str {
    match s {
        ImageGroundingStyle::Additive => "additive",
        ImageGroundingStyle::Concatenated => "concatenated",
    }
}

fn layout_name(m: LayoutMode) -> &'static str {
    match m {
        LayoutMode::Prior => "prior",
        LayoutMode::Uniform => "uniform",
    }
}

fn opt_text<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("auto".into(), T::to_string)
}

impl RunConfig {
    /// Every accepted key, in archive order.
    pub const KEYS: &'static [&'static str] = &[
        "d_model", "blocks", "heads", "d_text", "resampler_depth", "grounding_style", "encoder_seed",
        "timesteps", "beta_start", "beta_end", "sample_steps", "cfg_weight", "lambda", "clip_x0",
        "pretrain_steps", "stage_steps", "pretrain_lr", "lr", "weight_decay", "batch_size", "p_drop", "log_every",
        "cosine_decay",
        "strategy", "stage", "train_layout",
        "seed", "eval_seeds", "eval_per_level", "dataset_scenes", "theta_lo", "theta_hi", "calibration_scenes",
        "calibration_seed", "out", "checkpoint", "dataset",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "d_model" => self.d_model = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "d_text" => self.d_text = parse(key, v)?,
            "resampler_depth" => self.resampler_depth = parse(key, v)?,
            "grounding_style" => {
                self.grounding_style = v.parse().map_err(|_| Error::Config(format!("`grounding_style`: unknown style `{v}`")))?
            }
            "encoder_seed" => self.encoder_seed = parse(key, v)?,
            "timesteps" => self.timesteps = parse(key, v)?,
            "beta_start" => self.beta_start = parse(key, v)?,
            "beta_end" => self.beta_end = parse(key, v)?,
            "sample_steps" => self.sample_steps = parse(key, v)?,
            "cfg_weight" => self.cfg_weight = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "clip_x0" => self.clip_x0 = parse(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "stage_steps" => self.stage_steps = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "p_drop" => self.p_drop = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "cosine_decay" => self.cosine_decay = parse(key, v)?,
            "strategy" => self.strategy = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "stage" => self.stage = parse_stage(v)?,
            "train_layout" => self.train_layout = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "seed" => self.seed = parse(key, v)?,
            "eval_seeds" => self.eval_seeds = parse_list(key, v)?,
            "eval_per_level" => self.eval_per_level = parse(key, v)?,
            "dataset_scenes" => self.dataset_scenes = parse(key, v)?,
            "theta_lo" => self.theta_lo = parse_opt(key, v)?,
            "theta_hi" => self.theta_hi = parse_opt(key, v)?,
            "calibration_scenes" => self.calibration_scenes = parse(key, v)?,
            "calibration_seed" => self.calibration_seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "checkpoint" => self.checkpoint = parse_opt(key, v)?,
            "dataset" => self.dataset = parse_opt(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "d_model" => self.d_model.to_string(),
            "blocks" => self.blocks.to_string(),
            "heads" => self.heads.to_string(),
            "d_text" => self.d_text.to_string(),
            "resampler_depth" => self.resampler_depth.to_string(),
            "grounding_style" => style_name(self.grounding_style).into(),
            "encoder_seed" => self.encoder_seed.to_string(),
            "timesteps" => self.timesteps.to_string(),
            "beta_start" => self.beta_start.to_string(),
            "beta_end" => self.beta_end.to_string(),
            "sample_steps" => self.sample_steps.to_string(),
            "cfg_weight" => self.cfg_weight.to_string(),
            "lambda" => self.lambda.to_string(),
            "clip_x0" => self.clip_x0.to_string(),
            "pretrain_steps" => self.pretrain_steps.to_string(),
            "stage_steps" => self.stage_steps.to_string(),
            "pretrain_lr" => self.pretrain_lr.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "p_drop" => self.p_drop.to_string(),
            "log_every" => self.log_every.to_string(),
            "cosine_decay" => self.cosine_decay.to_string(),
            "strategy" => self.strategy.to_string(),
            "stage" => self.stage.to_string(),
            "train_layout" => layout_name(self.train_layout).into(),
            "seed" => self.seed.to_string(),
            "eval_seeds" => self.eval_seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            "eval_per_level" => self.eval_per_level.to_string(),
            "dataset_scenes" => self.dataset_scenes.to_string(),
            "theta_lo" => opt_text(&self.theta_lo),
            "theta_hi" => opt_text(&self.theta_hi),
            "calibration_scenes" => self.calibration_scenes.to_string(),
            "calibration_seed" => self.calibration_seed.to_string(),
            "out" => self.out.display().to_string(),
            "checkpoint" => opt_text(&self.checkpoint.as_ref().map(|p| p.display())),
            "dataset" => opt_text(&self.dataset.as_ref().map(|p| p.display())),
            _ => unreachable!("KEYS and get() list the same keys"),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Defaults, then the optional file, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = Self::default();
        if let Some(path) = file {
            c.apply_text(&std::fs::read_to_string(path)?)?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// The fully resolved configuration, one key per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    pub fn archive(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        std::fs::create_dir_all(dir.as_ref())?;
        let path = dir.as_ref().join("config.txt");
        std::fs::write(&path, self.to_text())?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_seeds.is_empty() {
            return Err(Error::Config("`eval_seeds` must list at least one seed".into()));
        }
        if self.theta_lo.is_some() != self.theta_hi.is_some() {
            return Err(Error::Config("set both `theta_lo` and `theta_hi` or neither".into()));
        }
        self.model()?;
        self.sampler().validate()?;
        self.train_config(self.pretrain_steps).validate()?;
        Ok(())
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::with_dims(self.d_model, self.blocks, self.heads, self.d_text);
        m.grounding.resampler_depth = self.resampler_depth;
        m.grounding.style = self.grounding_style;
        m.schedule = ScheduleConfig { timesteps: self.timesteps, beta_start: self.beta_start, beta_end: self.beta_end };
        m.encoder_seed = self.encoder_seed;
        m.validate()?;
        Ok(m)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { steps: self.sample_steps, cfg_weight: self.cfg_weight, eta: 0.0, lambda: self.lambda, clip_x0: self.clip_x0 }
    }

    /// Trainer settings for the configured strategy and stage.
    pub fn train_config(&self, steps: u64) -> TrainConfig {
        let pretrain = self.stage == Stage::Pretrain;
        TrainConfig {
            strategy: self.strategy,
            stage: self.stage,
            lr: if pretrain { self.pretrain_lr } else { self.lr },
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            steps,
            seed: self.seed,
            lambda: self.lambda,
            p_drop: self.p_drop,
            log_every: self.log_every,
            cosine_decay: self.cosine_decay,
        }
    }

    /// Configured thresholds, if both are set.
    pub fn thresholds(&self) -> Option<Thresholds> {
        Some(Thresholds { lo: self.theta_lo?, hi: self.theta_hi? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.set("eval_seeds", "3, 4").unwrap();
        c.set("theta_lo", "0.5").unwrap();
        c.set("theta_hi", "0.75").unwrap();
        c.set("checkpoint", "a/b.ckpt").unwrap();
        c.set("strategy", "reversed").unwrap();
        c.set("stage", "2").unwrap();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::from_text(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::from_text("d_modle = 8"), Err(Error::Config(m)) if m.contains("d_modle")));
        assert!(RunConfig::from_text("lr = fast").is_err());
        assert!(RunConfig::from_text("just a line").is_err());
        assert!(RunConfig::from_text("theta_lo = 0.5").is_err());
        assert!(RunConfig::from_text("strategy = single_stage\nstage = 2").is_err());
    }

    #[test]
    fn flags_override_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.txt");
        std::fs::write(&path, "# comment\nlambda = 0.6\nseed = 5 # trailing\n").unwrap();
        let c = RunConfig::resolve(Some(&path), &[("seed".into(), "9".into())]).unwrap();
        assert_eq!((c.lambda, c.seed, c.d_model), (0.6, 9, RunConfig::default().d_model));
        let archived = c.archive(dir.path().join("out")).unwrap();
        assert_eq!(RunConfig::resolve(Some(&archived), &[]).unwrap(), c);
    }

    #[test]
    fn every_key_is_settable() {
        let d = RunConfig::default();
        for k in RunConfig::KEYS {
            let mut c = d.clone();
            c.set(k, &d.get(k)).unwrap();
            assert_eq!(c, d, "{k}");
        }
    }
}
