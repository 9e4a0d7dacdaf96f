use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::plan::{group_of, plan_for, ParamGroup, Stage, StagePlan, Strategy};
use crate::error::{Error, Result};
use crate::model::{Conditioning, ModelConfig, MuseModel, TrainItem};
use crate::nn::{AdamWConfig, Checkpoint, Module, OptimizerState};
use crate::world::{derive_seed, generate_scene, LayoutMode, Scene, Split, MAX_SCENE_SUBJECTS, MIN_SUBJECTS};

/// Random-stream ids passed to [`derive_seed`].
pub const STREAM_SCENE: u64 = 1;
pub const STREAM_ITEM: u64 = 2;
const STREAM_PRETRAIN_SCENE: u64 = 3;
const STREAM_PRETRAIN_ITEM: u64 = 4;
const STREAM_HELD_OUT: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub stage: Stage,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Per-stage step budget; single-stage training runs twice this.
    pub steps: u64,
    pub seed: u64,
    pub lambda: f64,
    pub p_drop: f64,
    pub log_every: u64,
    /// Cosine decay of the learning rate to a tenth over the run, after a
    /// short linear warm-up. Off means a constant rate.
    #[serde(default)]
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::TwoStage,
            stage: Stage::Stage1,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 32,
            steps: 10_000,
            seed: 0,
            lambda: 0.8,
            p_drop: 0.1,
            log_every: 100,
            cosine_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and weight decay must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.p_drop) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("p_drop and λ must lie in [0, 1]".into()));
        }
        plan_for(self.strategy, self.stage).map(|_| ())
    }

    pub fn total_steps(&self) -> Result<u64> {
        Ok(self.steps * plan_for(self.strategy, self.stage)?.budget_multiplier)
    }

    /// Learning-rate multiplier for `step` of a `total`-step run.
    pub fn lr_scale(&self, step: u64, total: u64) -> f64 {
        if !self.cosine_decay || total == 0 {
            return 1.0;
        }
        let warmup = (total / 20).min(500);
        if step < warmup {
            return (step + 1) as f64 / warmup as f64;
        }
        let p = (step - warmup) as f64 / (total - warmup).max(1) as f64;
        0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Where training scenes come from.
#[derive(Clone, Debug)]
pub enum SceneSource {
    /// Fresh scenes with 2–6 subjects, generated on demand.
    Generated(LayoutMode),
    /// Scenes drawn from a fixed dataset.
    Dataset(Arc<Vec<Scene>>),
}

/// Scene number `index` of the stream keyed by `seed`. The index counts
/// batch slots from the start of the stage sequence, so every strategy
/// sees the same scenes in the same order.
pub fn scene_for_step(source: &SceneSource, seed: u64, stream: u64, index: u64) -> Result<Scene> {
    let s = derive_seed(seed, stream, index);
    match source {
        SceneSource::Generated(mode) => {
            let span = (MAX_SCENE_SUBJECTS - MIN_SUBJECTS + 1) as u64;
            let n = MIN_SUBJECTS + (derive_seed(s, 0, 0) % span) as usize;
            generate_scene(s, n, *mode, Split::Train)
        }
        SceneSource::Dataset(scenes) => {
            if scenes.is_empty() {
                return Err(Error::Config("training dataset is empty".into()));
            }
            Ok(scenes[(s % scenes.len() as u64) as usize].clone())
        }
    }
}

/// Mean denoising loss, without condition dropout, over `n` held-out scenes
/// with fixed timesteps and noise.
pub fn held_out_loss(model: &mut MuseModel, mode: LayoutMode, seed: u64, n: usize) -> Result<f64> {
    let span = (MAX_SCENE_SUBJECTS - MIN_SUBJECTS + 1) as u64;
    let scenes = (0..n as u64)
        .map(|i| {
            let s = derive_seed(seed, STREAM_HELD_OUT, i);
            generate_scene(s, MIN_SUBJECTS + (i % span) as usize, mode, Split::Eval)
        })
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<TrainItem> =
        scenes.iter().zip(0..).map(|(scene, i)| TrainItem { scene, seed: derive_seed(seed, STREAM_HELD_OUT + 1, i) }).collect();
    let mut total = 0.0;
    for chunk in items.chunks(16) {
        total += model.batch_loss(chunk, 0.0, false)? * chunk.len() as f64;
    }
    Ok(total / n.max(1) as f64)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub strategy: Strategy,
    pub stage: Stage,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub optimizer: OptimizerState,
    /// Steps completed within the stage.
    pub step: u64,
    pub finished: bool,
    pub log: Vec<LogRecord>,
}

/// Sets frozen flags so that only the plan's trainable groups update.
pub fn apply_freeze(model: &mut MuseModel, plan: &StagePlan) {
    let trainable = plan.trainable.clone();
    model.set_frozen_by(&move |name| !trainable.contains(&group_of(name)));
}

/// SHA-256 of every group's parameter names, shapes and values.
pub fn group_hashes(model: &MuseModel) -> BTreeMap<ParamGroup, String> {
    let mut hashers: BTreeMap<ParamGroup, Sha256> = ParamGroup::ALL.into_iter().map(|g| (g, Sha256::new())).collect();
    model.visit_params(&mut |p| {
        let h = hashers.get_mut(&group_of(p.name())).expect("every group has a hasher");
        h.update(p.name().as_bytes());
        for d in p.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    });
    hashers
        .into_iter()
        .map(|(g, h)| (g, h.finalize().iter().map(|b| format!("{b:02x}")).collect()))
        .collect()
}

/// Runs (or resumes) one stage. Steps `start..min(until, total)` are taken,
/// where `start` is the resume step; `log` sees every logged record.
pub fn train_stage(
    model: &mut MuseModel,
    cfg: &TrainConfig,
    source: &SceneSource,
    resume: Option<(OptimizerState, u64)>,
    until: Option<u64>,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<StageOutcome> {
    cfg.validate()?;
    let plan = plan_for(cfg.strategy, cfg.stage)?;
    apply_freeze(model, &plan);
    model.set_conditioning(plan.conditioning);
    model.set_lambda(cfg.lambda);
    let adam = AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let (mut opt, start) = match resume {
        Some((o, s)) => {
            if o.config != adam {
                return Err(Error::Config("resumed optimizer settings differ from the run config".into()));
            }
            (o, s)
        }
        None => (OptimizerState::new(adam), 0),
    };
    let total = cfg.total_steps()?;
    let end = until.map_or(total, |u| u.min(total));
    let frozen = plan.frozen();
    let before = group_hashes(model);

    let (scene_stream, item_stream) = match cfg.stage {
        Stage::Pretrain => (STREAM_PRETRAIN_SCENE, STREAM_PRETRAIN_ITEM),
        _ => (STREAM_SCENE, STREAM_ITEM),
    };
    let offset = cfg.stage.stream_offset() * cfg.steps;
    let batch = cfg.batch_size as u64;
    let mut records = Vec::new();
    for step in start..end {
        let first = (offset + step) * batch;
        let scenes = (first..first + batch)
            .map(|i| scene_for_step(source, cfg.seed, scene_stream, i))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<TrainItem> = scenes
            .iter()
            .zip(first..)
            .map(|(scene, i)| TrainItem { scene, seed: derive_seed(cfg.seed, item_stream, i) })
            .collect();
        model.zero_grad();
        let loss = match model.batch_loss(&items, cfg.p_drop, true) {
            Err(Error::NonFinite(_)) => f64::NAN,
            r => r?,
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let scale = cfg.lr_scale(step, total);
        opt.step_scaled(model, scale)?;
        let done = step + 1;
        if done % cfg.log_every.max(1) == 0 || done == total {
            let r = LogRecord { step: done, loss, lr: cfg.lr * scale, strategy: cfg.strategy, stage: cfg.stage };
            log(&r);
            records.push(r);
        }
    }

    let after = group_hashes(model);
    if let Some(g) = frozen.iter().find(|g| before[g] != after[g]) {
        return Err(Error::Config(format!("frozen group `{}` changed during {}", g.name(), cfg.stage)));
    }
    Ok(StageOutcome { optimizer: opt, step: end.max(start), finished: end == total, log: records })
}

/// JSON header stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Model init seed; parameters are overwritten on load.
    pub init_seed: u64,
    pub conditioning: Conditioning,
    pub lambda: f64,
    pub train: Option<TrainConfig>,
    /// Steps completed within `train.stage`.
    pub step: u64,
}

/// Writes parameters (bit-exact), freeze flags, optimizer moments and `meta`.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &MuseModel, optimizer: Option<&OptimizerState>, meta: &CheckpointMeta) -> Result<()> {
    Checkpoint::capture(model, optimizer, serde_json::to_string(meta)?).save(path)
}

/// Rebuilds the model described by a checkpoint and restores its state.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MuseModel, Option<OptimizerState>, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.meta)
        .map_err(|e| Error::Format(format!("checkpoint header is not a model description: {e}")))?;
    let mut model = MuseModel::new(meta.model, meta.init_seed)?;
    ckpt.restore(&mut model)?;
    model.set_conditioning(meta.conditioning);
    model.set_lambda(meta.lambda);
    Ok((model, ckpt.optimizer, meta))
}
