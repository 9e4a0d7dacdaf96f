use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::model::Conditioning;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Base,
    Layout,
    Subject,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Base, ParamGroup::Layout, ParamGroup::Subject];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Base => "base",
            ParamGroup::Layout => "layout",
            ParamGroup::Subject => "subject",
        }
    }
}

const LAYOUT_MARKERS: [&str; 5] =
    [".cross.w_kt.", ".cross.w_vt.", "grounding.text_mlp.", "grounding.empty_text", "grounding.empty_box"];
const SUBJECT_MARKERS: [&str; 6] = [
    ".cross.w_ki.",
    ".cross.w_vi.",
    "grounding.resampler.",
    "grounding.box_mlp.",
    "grounding.concat_mlp.",
    "grounding.empty_image",
];

/// Group of a parameter, from its name.
pub fn group_of(name: &str) -> ParamGroup {
    if LAYOUT_MARKERS.iter().any(|m| name.contains(m)) {
        ParamGroup::Layout
    } else if SUBJECT_MARKERS.iter().any(|m| name.contains(m)) {
        ParamGroup::Subject
    } else {
        ParamGroup::Base
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    TwoStage,
    FullDca,
    SingleStage,
    Joint,
    Reversed,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::TwoStage, Strategy::Joint, Strategy::Reversed, Strategy::SingleStage, Strategy::FullDca];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::TwoStage => "two_stage",
            Strategy::FullDca => "full_dca",
            Strategy::SingleStage => "single_stage",
            Strategy::Joint => "joint",
            Strategy::Reversed => "reversed",
        }
    }

    /// Stages the strategy runs after pretraining.
    pub fn stages(self) -> &'static [Stage] {
        match self {
            Strategy::SingleStage => &[Stage::Stage1],
            _ => &[Stage::Stage1, Stage::Stage2],
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Stage1,
    Stage2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }

    /// Position of the stage in the shared post-pretraining data stream.
    pub fn stream_offset(self) -> u64 {
        match self {
            Stage::Pretrain | Stage::Stage1 => 0,
            Stage::Stage2 => 1,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" | "0" => Ok(Stage::Pretrain),
            "stage1" | "1" => Ok(Stage::Stage1),
            "stage2" | "2" => Ok(Stage::Stage2),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

/// What one stage feeds the network and which groups it may update.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub conditioning: Conditioning,
    pub trainable: Vec<ParamGroup>,
    /// Step budget in units of the per-stage budget.
    pub budget_multiplier: u64,
}

impl StagePlan {
    pub fn frozen(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL.into_iter().filter(|g| !self.trainable.contains(g)).collect()
    }
}

fn cond(mode: AttentionMode, use_text: bool, use_image: bool) -> Conditioning {
    Conditioning { mode, use_text, use_image }
}

/// The stage table. `Pretrain` ignores the strategy.
pub fn plan_for(strategy: Strategy, stage: Stage) -> Result<StagePlan> {
    use AttentionMode::*;
    use ParamGroup::*;
    let (conditioning, trainable, budget_multiplier) = match (strategy, stage) {
        (_, Stage::Pretrain) => (Conditioning::TEXT_ONLY, vec![Base], 1),
        (Strategy::TwoStage | Strategy::Joint, Stage::Stage1) => (cond(Cca, true, false), vec![Layout], 1),
        (Strategy::TwoStage, Stage::Stage2) => (cond(Fca, true, true), vec![Subject], 1),
        (Strategy::Joint, Stage::Stage2) => (cond(Fca, true, true), vec![Layout, Subject], 1),
        (Strategy::FullDca, Stage::Stage1) => (cond(DcaLayout, true, false), vec![Layout], 1),
        (Strategy::FullDca, Stage::Stage2) => (cond(DcaLayout, true, true), vec![Subject], 1),
        (Strategy::SingleStage, Stage::Stage1) => (cond(Fca, true, true), vec![Layout, Subject], 2),
        (Strategy::Reversed, Stage::Stage1) => (cond(Fca, false, true), vec![Subject], 1),
        (Strategy::Reversed, Stage::Stage2) => (cond(Fca, true, true), vec![Layout], 1),
        (Strategy::SingleStage, Stage::Stage2) => {
            return Err(Error::Config("single_stage has no second stage".into()));
        }
    };
    Ok(StagePlan { conditioning, trainable, budget_multiplier })
}
