use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::detector::detect_shapes;
use super::metrics::{identity_local, layout_success, lms_success, report_by_level, text_align, GroundTruth, LevelReport, Thresholds};
use crate::denoiser::SamplerConfig;
use crate::error::{Error, Result};
use crate::model::MuseModel;
use crate::world::{derive_seed, generate_scene, Image, LayoutMode, Scene, Split, ToyEncoders, MAX_SCENE_SUBJECTS, MIN_SUBJECTS};

const STREAM_EVAL_SCENE: u64 = 0xE5;
const STREAM_SAMPLE: u64 = 0x5A;
/// Images sampled per network batch.
const SAMPLE_CHUNK: usize = 16;

/// Held-out uniform-layout scenes, `per_level` at each instance count.
pub fn eval_scenes(seed: u64, per_level: usize) -> Result<Vec<Scene>> {
    let mut out = Vec::with_capacity(per_level * (MAX_SCENE_SUBJECTS - MIN_SUBJECTS + 1));
    for n in MIN_SUBJECTS..=MAX_SCENE_SUBJECTS {
        for i in 0..per_level as u64 {
            out.push(generate_scene(derive_seed(seed, STREAM_EVAL_SCENE, n as u64 * 1_000_000 + i), n, LayoutMode::Uniform, Split::Eval)?);
        }
    }
    Ok(out)
}

/// Metrics of one generated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub level: usize,
    pub layout_success: bool,
    pub ious: Vec<f64>,
    pub text_align: f64,
    /// Identity similarity of every subject against its reference crop.
    pub identity: Vec<f64>,
}

/// Scores generated images against their scenes. References are the
/// subjects' crops of the scene canvas.
pub fn score_images(scenes: &[&Scene], images: &[Image], encoders: &ToyEncoders) -> Result<Vec<SampleRecord>> {
    if scenes.len() != images.len() {
        return Err(Error::invalid("one image per scene is required"));
    }
    scenes
        .iter()
        .zip(images)
        .map(|(scene, img)| {
            let dets = detect_shapes(img);
            let gt: Vec<GroundTruth> = scene.subjects.iter().map(|s| GroundTruth { class: s.class, bbox: s.bbox }).collect();
            let layout = layout_success(&gt, &dets);
            let identity = scene
                .subjects
                .iter()
                .map(|s| identity_local(img, &s.bbox, &scene.canvas.crop(&s.bbox)?, encoders))
                .collect::<Result<Vec<_>>>()?;
            Ok(SampleRecord {
                level: scene.level(),
                layout_success: layout.success,
                ious: layout.ious,
                text_align: text_align(&dets, &scene.prompt_tokens),
                identity,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub layout: LevelReport,
    pub text_align: f64,
    /// Mean identity similarity over all subjects.
    pub identity_local: f64,
    pub lms_success_lo: f64,
    pub lms_success_hi: f64,
    pub seconds_per_image: f64,
}

pub fn seed_metrics(seed: u64, records: &[SampleRecord], thresholds: Thresholds, seconds_per_image: f64) -> Result<SeedMetrics> {
    if records.is_empty() {
        return Err(Error::invalid("no samples to summarize"));
    }
    let n = records.len() as f64;
    let layout = report_by_level(&records.iter().map(|r| (r.level, r.layout_success)).collect::<Vec<_>>())?;
    let sims: Vec<f64> = records.iter().flat_map(|r| r.identity.iter().copied()).collect();
    let rate = |t: f64| records.iter().filter(|r| lms_success(&r.identity, t)).count() as f64 / n;
    Ok(SeedMetrics {
        seed,
        layout,
        text_align: records.iter().map(|r| r.text_align).sum::<f64>() / n,
        identity_local: sims.iter().sum::<f64>() / sims.len().max(1) as f64,
        lms_success_lo: rate(thresholds.lo),
        lms_success_hi: rate(thresholds.hi),
        seconds_per_image,
    })
}

/// Samples one image per scene with the model and scores it.
pub fn evaluate_seed(
    model: &MuseModel,
    scenes: &[Scene],
    sampler: &SamplerConfig,
    seed: u64,
    thresholds: Thresholds,
) -> Result<(SeedMetrics, Vec<Image>)> {
    let start = Instant::now();
    // Chunks run in parallel; results are collected in order.
    let chunks = scenes
        .par_chunks(SAMPLE_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let refs: Vec<&Scene> = chunk.iter().collect();
            let seeds: Vec<u64> = (0..chunk.len()).map(|i| derive_seed(seed, STREAM_SAMPLE, (c * SAMPLE_CHUNK + i) as u64)).collect();
            Ok(model.generate(&refs, sampler, &seeds)?.images)
        })
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<Image> = chunks.into_iter().flatten().collect();
    let seconds = start.elapsed().as_secs_f64() / scenes.len().max(1) as f64;
    let refs: Vec<&Scene> = scenes.iter().collect();
    let records = score_images(&refs, &images, &model.encoders)?;
    Ok((seed_metrics(seed, &records, thresholds, seconds)?, images))
}

/// Seed-averaged evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub seeds: Vec<u64>,
    pub thresholds: Thresholds,
    /// Per-level rates averaged over the seeds that have the level.
    pub levels: BTreeMap<usize, Option<f64>>,
    pub avg_sample_weighted: f64,
    pub avg_level_weighted: f64,
    pub text_align: f64,
    pub identity_local: f64,
    pub lms_success_lo: f64,
    pub lms_success_hi: f64,
    pub seconds_per_image: f64,
    pub per_seed: Vec<SeedMetrics>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn aggregate(label: impl Into<String>, thresholds: Thresholds, per_seed: Vec<SeedMetrics>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::invalid("an evaluation report needs at least one seed"));
        }
        let levels = (MIN_SUBJECTS..=MAX_SCENE_SUBJECTS)
            .map(|l| {
                let rates: Vec<f64> = per_seed.iter().filter_map(|m| m.layout.levels.get(&l).copied().flatten()).collect();
                (l, (!rates.is_empty()).then(|| mean(rates.into_iter())))
            })
            .collect();
        Ok(Self {
            label: label.into(),
            seeds: per_seed.iter().map(|m| m.seed).collect(),
            thresholds,
            levels,
            avg_sample_weighted: mean(per_seed.iter().map(|m| m.layout.avg_sample_weighted)),
            avg_level_weighted: mean(per_seed.iter().map(|m| m.layout.avg_level_weighted)),
            text_align: mean(per_seed.iter().map(|m| m.text_align)),
            identity_local: mean(per_seed.iter().map(|m| m.identity_local)),
            lms_success_lo: mean(per_seed.iter().map(|m| m.lms_success_lo)),
            lms_success_hi: mean(per_seed.iter().map(|m| m.lms_success_hi)),
            seconds_per_image: mean(per_seed.iter().map(|m| m.seconds_per_image)),
            per_seed,
        })
    }

    /// Evaluates one model under every seed.
    pub fn evaluate(
        label: impl Into<String>,
        model: &MuseModel,
        scenes: &[Scene],
        sampler: &SamplerConfig,
        seeds: &[u64],
        thresholds: Thresholds,
    ) -> Result<Self> {
        let per_seed =
            seeds.iter().map(|&s| Ok(evaluate_seed(model, scenes, sampler, s, thresholds)?.0)).collect::<Result<Vec<_>>>()?;
        Self::aggregate(label, thresholds, per_seed)
    }

    pub const CSV_HEADER: &'static str =
        "label,L2,L3,L4,L5,L6,Avg,AvgLevel,Time,TextAlign,IdentityLocal,SR_lo,SR_hi";

    /// One CSV row in [`Self::CSV_HEADER`] order; absent levels are `-`.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.label.clone()];
        for l in MIN_SUBJECTS..=MAX_SCENE_SUBJECTS {
            cols.push(self.levels.get(&l).copied().flatten().map_or("-".to_string(), |v| format!("{v:.4}")));
        }
        for v in [
            self.avg_sample_weighted,
            self.avg_level_weighted,
            self.seconds_per_image,
            self.text_align,
            self.identity_local,
            self.lms_success_lo,
            self.lms_success_hi,
        ] {
            cols.push(format!("{v:.4}"));
        }
        cols.join(",")
    }

    pub fn to_csv(reports: &[EvalReport]) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}
