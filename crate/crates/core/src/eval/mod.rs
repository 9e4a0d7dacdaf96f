//! Metrics on the synthetic world: a deterministic shape detector, layout
//! success per instance-count level, local identity similarity, the
//! multi-subject success rate at calibrated thresholds and text alignment.

mod detector;
mod metrics;
mod run;

pub use detector::{detect_shapes, pixel_color, Detection, FOREGROUND_THRESHOLD, MIN_COMPONENT_PIXELS};
pub use metrics::{
    calibrate_thresholds, greedy_match, identity_local, iou, layout_success, lms_success, percentile, report_by_level,
    same_identity_similarities, text_align, GroundTruth, LayoutOutcome, LevelReport, Thresholds, LAYOUT_IOU,
};
pub use run::{eval_scenes, evaluate_seed, score_images, seed_metrics, EvalReport, SampleRecord, SeedMetrics};

#[cfg(test)]
mod tests;
