//! Base pretraining and the staged training strategies, with strict
//! parameter freezing.
//!
//! Every parameter belongs to exactly one group:
//!
//! * `base`: patch embedding, time MLP, self-attention, feed-forward, the
//!   prompt projections of cross-attention, norms and the output head.
//! * `layout`: the layout-token projections `W_kT`/`W_vT`, the text-grounding
//!   MLP and the empty text and box tokens.
//! * `subject`: the subject-token projections `W_kI`/`W_vI`, the resampler,
//!   both image-grounding MLPs and the empty image tokens.
//!
//! A stage trains a subset of groups; all others are frozen and stay
//! bit-identical.

mod plan;
mod run;

pub use plan::{group_of, plan_for, ParamGroup, Stage, StagePlan, Strategy};
pub use run::{
    apply_freeze, group_hashes, held_out_loss, load_checkpoint, save_checkpoint, scene_for_step, train_stage, CheckpointMeta, LogRecord,
    SceneSource, StageOutcome, TrainConfig, STREAM_ITEM, STREAM_SCENE,
};
