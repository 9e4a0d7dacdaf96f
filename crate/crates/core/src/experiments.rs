//! End-to-end ablation suites on the synthetic benchmark:
//!
//! * `layout`: stage-1 layout control with joint-softmax attention against
//!   the decoupled (added) layout term, scored by layout success.
//! * `strategy`: the five training strategies, scored by the multi-subject
//!   success rate at the strict threshold.
//! * `scale`: the inference image-attention scale λ, scored by identity
//!   similarity and text alignment.
//!
//! Every arm starts from one shared pretrained base. A [`Lab`] caches the
//! trained arms so suites that need the same stage run it once.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{calibrate_thresholds, eval_scenes, evaluate_seed, EvalReport, Thresholds};
use crate::model::MuseModel;
use crate::trainer::{train_stage, LogRecord, SceneSource, Stage, Strategy, TrainConfig};
use crate::world::{LayoutMode, Scene};

/// Seed of the fixed evaluation scene set.
const EVAL_SCENE_SEED: u64 = 0xBE_4C;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Layout,
    Strategy,
    Scale,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layout" => Ok(Self::Layout),
            "strategy" => Ok(Self::Strategy),
            "scale" => Ok(Self::Scale),
            _ => Err(Error::Config(format!("unknown suite `{s}` (expected layout, strategy or scale)"))),
        }
    }
}

/// Trains the shared base: text-only conditioning on prior-layout scenes.
pub fn pretrain(cfg: &RunConfig, log: &mut dyn FnMut(&LogRecord)) -> Result<MuseModel> {
    let mut model = MuseModel::new(cfg.model()?, cfg.seed)?;
    let tc = TrainConfig { stage: Stage::Pretrain, ..cfg.train_config(cfg.pretrain_steps) };
    let tc = TrainConfig { lr: cfg.pretrain_lr, ..tc };
    train_stage(&mut model, &tc, &SceneSource::Generated(LayoutMode::Prior), None, None, log)?;
    Ok(model)
}

/// The configured thresholds, or thresholds calibrated on clean scenes.
pub fn resolve_thresholds(cfg: &RunConfig, model: &MuseModel) -> Result<Thresholds> {
    match cfg.thresholds() {
        Some(t) => Ok(t),
        None => calibrate_thresholds(&model.encoders, cfg.calibration_seed, cfg.calibration_scenes),
    }
}

/// The stage that produces a strategy's final model.
pub fn final_stage(strategy: Strategy) -> Stage {
    match strategy {
        Strategy::SingleStage => Stage::Stage1,
        _ => Stage::Stage2,
    }
}

/// Trained arms keyed by (strategy, stage, seed), all from one base.
pub struct Lab<'a> {
    pub cfg: RunConfig,
    pub base: MuseModel,
    pub thresholds: Thresholds,
    pub scenes: Vec<Scene>,
    arms: BTreeMap<(Strategy, Stage, u64), MuseModel>,
    log: Box<dyn FnMut(&LogRecord) + 'a>,
}

impl<'a> Lab<'a> {
    pub fn new(cfg: RunConfig, base: MuseModel, log: Box<dyn FnMut(&LogRecord) + 'a>) -> Result<Self> {
        cfg.validate()?;
        let thresholds = resolve_thresholds(&cfg, &base)?;
        let scenes = eval_scenes(EVAL_SCENE_SEED, cfg.eval_per_level)?;
        Ok(Self { cfg, base, thresholds, scenes, arms: BTreeMap::new(), log })
    }

    /// Joint training shares its first stage with the two-stage strategy.
    fn key(strategy: Strategy, stage: Stage, seed: u64) -> (Strategy, Stage, u64) {
        match (strategy, stage) {
            (Strategy::Joint, Stage::Stage1) => (Strategy::TwoStage, stage, seed),
            _ => (strategy, stage, seed),
        }
    }

    /// The model after `stage` of `strategy`, trained with `seed` on demand.
    pub fn trained(&mut self, strategy: Strategy, stage: Stage, seed: u64) -> Result<&MuseModel> {
        let key = Self::key(strategy, stage, seed);
        if !self.arms.contains_key(&key) {
            let mut model = match stage {
                Stage::Stage2 => self.trained(strategy, Stage::Stage1, seed)?.clone(),
                _ => self.base.clone(),
            };
            let tc = TrainConfig { strategy, stage, seed, ..self.cfg.train_config(self.cfg.stage_steps) };
            let tc = TrainConfig { lr: self.cfg.lr, ..tc };
            train_stage(&mut model, &tc, &SceneSource::Generated(self.cfg.train_layout), None, None, &mut *self.log)?;
            self.arms.insert(key, model);
        }
        Ok(&self.arms[&key])
    }

    /// Evaluates one arm per seed, each seed with its own trained model.
    fn evaluate_arm(&mut self, label: &str, strategy: Strategy, stage: Stage, lambda: Option<f64>) -> Result<EvalReport> {
        let mut sampler = self.cfg.sampler();
        if let Some(l) = lambda {
            sampler.lambda = l;
        }
        let mut per_seed = Vec::new();
        for seed in self.cfg.eval_seeds.clone() {
            self.trained(strategy, stage, seed)?;
            let model = &self.arms[&Self::key(strategy, stage, seed)];
            per_seed.push(evaluate_seed(model, &self.scenes, &sampler, seed, self.thresholds)?.0);
        }
        EvalReport::aggregate(label, self.thresholds, per_seed)
    }

    /// Stage-1 layout control: joint softmax (`cca`) against decoupled
    /// addition (`dca_layout`).
    pub fn layout_suite(&mut self) -> Result<Vec<EvalReport>> {
        Ok(vec![
            self.evaluate_arm("cca", Strategy::TwoStage, Stage::Stage1, None)?,
            self.evaluate_arm("dca_layout", Strategy::FullDca, Stage::Stage1, None)?,
        ])
    }

    /// Final models of all five strategies.
    pub fn strategy_suite(&mut self) -> Result<Vec<EvalReport>> {
        Strategy::ALL.into_iter().map(|s| self.evaluate_arm(s.name(), s, final_stage(s), None)).collect()
    }

    /// The two-stage model sampled at each image-attention scale.
    pub fn scale_suite(&mut self, values: &[f64]) -> Result<Vec<EvalReport>> {
        if values.is_empty() {
            return Err(Error::Config("the scale suite needs at least one λ value".into()));
        }
        values
            .iter()
            .map(|&l| self.evaluate_arm(&format!("lambda={l}"), Strategy::TwoStage, Stage::Stage2, Some(l)))
            .collect()
    }

    pub fn run(&mut self, suite: Suite, values: &[f64]) -> Result<Vec<EvalReport>> {
        match suite {
            Suite::Layout => self.layout_suite(),
            Suite::Strategy => self.strategy_suite(),
            Suite::Scale => self.scale_suite(values),
        }
    }
}

/// Checked directional claims of the suites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: String,
    pub passed: bool,
    pub detail: String,
}

fn by_label<'r>(reports: &'r [EvalReport], label: &str) -> Result<&'r EvalReport> {
    reports.iter().find(|r| r.label == label).ok_or_else(|| Error::invalid(format!("no report labelled `{label}`")))
}

/// Joint-softmax layout control beats the decoupled arm by `margin`.
pub fn layout_verdict(reports: &[EvalReport], margin: f64) -> Result<Verdict> {
    let (c, d) = (by_label(reports, "cca")?.avg_sample_weighted, by_label(reports, "dca_layout")?.avg_sample_weighted);
    Ok(Verdict {
        claim: format!("cca layout success exceeds dca_layout by >= {margin}"),
        passed: c - d >= margin,
        detail: format!("cca {c:.4}, dca_layout {d:.4}, delta {:.4}", c - d),
    })
}

/// Strategy ordering two_stage > joint >= reversed > single_stage >= full_dca
/// on the strict success rate, with two_stage ahead of the last two by `margin`.
pub fn strategy_verdict(reports: &[EvalReport], margin: f64) -> Result<Verdict> {
    let sr = |l: &str| by_label(reports, l).map(|r| r.lms_success_hi);
    let (two, joint, rev, single, full) =
        (sr("two_stage")?, sr("joint")?, sr("reversed")?, sr("single_stage")?, sr("full_dca")?);
    let passed = two > joint
        && joint >= rev
        && rev > single
        && single >= full
        && two - single >= margin
        && two - full >= margin;
    Ok(Verdict {
        claim: format!("two_stage > joint >= reversed > single_stage >= full_dca, two_stage leads the last two by >= {margin}"),
        passed,
        detail: format!("two_stage {two:.4}, joint {joint:.4}, reversed {rev:.4}, single_stage {single:.4}, full_dca {full:.4}"),
    })
}

/// Across increasing λ, identity similarity never drops by more than `band`
/// and text alignment never rises by more than `band` per step.
pub fn scale_verdict(reports: &[EvalReport], band: f64) -> Verdict {
    let ok = reports.windows(2).all(|w| {
        w[1].identity_local >= w[0].identity_local - band && w[1].text_align <= w[0].text_align + band
    });
    let detail = reports
        .iter()
        .map(|r| format!("{}: identity {:.4}, text {:.4}", r.label, r.identity_local, r.text_align))
        .collect::<Vec<_>>()
        .join("; ");
    Verdict { claim: format!("identity non-decreasing and text alignment non-increasing in λ (band {band})"), passed: ok, detail }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{LevelReport, SeedMetrics};

    fn report(label: &str, layout: f64, sr_hi: f64, identity: f64, text: f64) -> EvalReport {
        let m = SeedMetrics {
            seed: 0,
            layout: LevelReport { levels: BTreeMap::new(), avg_sample_weighted: layout, avg_level_weighted: layout },
            text_align: text,
            identity_local: identity,
            lms_success_lo: sr_hi,
            lms_success_hi: sr_hi,
            seconds_per_image: 0.0,
        };
        EvalReport::aggregate(label, Thresholds { lo: 0.5, hi: 0.6 }, vec![m]).unwrap()
    }

    #[test]
    fn verdicts_follow_their_claims() {
        let l = [report("cca", 0.88, 0.0, 0.0, 0.0), report("dca_layout", 0.78, 0.0, 0.0, 0.0)];
        assert!(layout_verdict(&l, 0.05).unwrap().passed);
        assert!(!layout_verdict(&l, 0.2).unwrap().passed);

        let s: Vec<_> = [("two_stage", 0.5), ("joint", 0.45), ("reversed", 0.42), ("single_stage", 0.2), ("full_dca", 0.1)]
            .into_iter()
            .map(|(n, v)| report(n, 0.0, v, 0.0, 0.0))
            .collect();
        assert!(strategy_verdict(&s, 0.1).unwrap().passed);
        let mut bad = s.clone();
        bad[1].lms_success_hi = 0.6;
        assert!(!strategy_verdict(&bad, 0.1).unwrap().passed);
        assert!(strategy_verdict(&s[..4], 0.1).is_err());

        let up = [report("a", 0.0, 0.0, 0.70, 0.33), report("b", 0.0, 0.0, 0.695, 0.335), report("c", 0.0, 0.0, 0.72, 0.30)];
        assert!(scale_verdict(&up, 0.01).passed);
        let down = [report("a", 0.0, 0.0, 0.70, 0.33), report("b", 0.0, 0.0, 0.68, 0.33)];
        assert!(!scale_verdict(&down, 0.01).passed);
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("scale".parse::<Suite>().unwrap(), Suite::Scale);
        assert!("tables".parse::<Suite>().is_err());
    }
}
