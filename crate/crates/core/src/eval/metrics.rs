use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::detector::Detection;
use crate::error::{Error, Result};
use crate::grounding::BoundingBox;
use crate::world::{
    cosine, derive_seed, generate_scene, ClassId, Image, LayoutMode, Split, ToyEncoders, BOS_TOKEN, MAX_SCENE_SUBJECTS,
    MIN_SUBJECTS,
};

/// IoU threshold a matched instance must exceed.
pub const LAYOUT_IOU: f64 = 0.5;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

/// Ground-truth instance used by the layout metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class: ClassId,
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutOutcome {
    pub success: bool,
    /// IoU of each ground-truth instance with its matched detection (0 when unmatched).
    pub ious: Vec<f64>,
}

/// Class-constrained greedy matching by descending IoU. Returns, for every
/// ground-truth instance, its matched detection and the pair's IoU.
pub fn greedy_match(gt: &[GroundTruth], dets: &[Detection]) -> Vec<Option<(usize, f64)>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for (j, d) in dets.iter().enumerate() {
            if g.class == d.class {
                let v = iou(&g.bbox, &d.bbox);
                if v > 0.0 {
                    pairs.push((v, i, j));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; gt.len()];
    let mut used = vec![false; dets.len()];
    for (v, i, j) in pairs {
        if out[i].is_none() && !used[j] {
            out[i] = Some((j, v));
            used[j] = true;
        }
    }
    out
}

/// Success iff every ground-truth instance is matched with IoU above 0.5.
pub fn layout_success(gt: &[GroundTruth], dets: &[Detection]) -> LayoutOutcome {
    let ious: Vec<f64> = greedy_match(gt, dets).iter().map(|m| m.map_or(0.0, |(_, v)| v)).collect();
    LayoutOutcome { success: ious.iter().all(|&v| v > LAYOUT_IOU), ious }
}

/// Layout success rates per instance-count level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    /// Rate per level 2..=6; `None` marks a level without samples.
    pub levels: BTreeMap<usize, Option<f64>>,
    /// Mean over samples.
    pub avg_sample_weighted: f64,
    /// Mean over the levels that have samples.
    pub avg_level_weighted: f64,
}

pub fn report_by_level(samples: &[(usize, bool)]) -> Result<LevelReport> {
    let mut tally: BTreeMap<usize, (usize, usize)> = (MIN_SUBJECTS..=MAX_SCENE_SUBJECTS).map(|l| (l, (0, 0))).collect();
    for &(level, ok) in samples {
        let e = tally
            .get_mut(&level)
            .ok_or_else(|| Error::invalid(format!("instance count {level} outside {MIN_SUBJECTS}..={MAX_SCENE_SUBJECTS}")))?;
        e.0 += ok as usize;
        e.1 += 1;
    }
    let levels: BTreeMap<usize, Option<f64>> =
        tally.iter().map(|(&l, &(s, n))| (l, (n > 0).then(|| s as f64 / n as f64))).collect();
    let present: Vec<f64> = levels.values().flatten().copied().collect();
    let total: usize = tally.values().map(|t| t.1).sum();
    let succ: usize = tally.values().map(|t| t.0).sum();
    Ok(LevelReport {
        avg_sample_weighted: if total == 0 { 0.0 } else { succ as f64 / total as f64 },
        avg_level_weighted: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
        levels,
    })
}

/// Cosine between the pooled embeddings of the generated crop at `gt_box`
/// and the reference crop.
pub fn identity_local(generated: &Image, gt_box: &BoundingBox, reference: &Image, encoders: &ToyEncoders) -> Result<f64> {
    let crop = generated.crop(gt_box)?;
    let (_, a) = encoders.encode_reference(&crop)?;
    let (_, b) = encoders.encode_reference(reference)?;
    Ok(cosine(&a, &b))
}

/// Success iff every subject's similarity reaches the threshold.
pub fn lms_success(similarities: &[f64], threshold: f64) -> bool {
    similarities.iter().all(|&s| s >= threshold)
}

/// Fraction of the prompt's classes detected anywhere in the image.
pub fn text_align(dets: &[Detection], prompt: &[u32]) -> f64 {
    let wanted: BTreeSet<u32> = prompt.iter().copied().filter(|&t| t != BOS_TOKEN).collect();
    if wanted.is_empty() {
        return 1.0;
    }
    let found: BTreeSet<u32> = dets.iter().map(|d| crate::world::class_token(d.class)).collect();
    wanted.intersection(&found).count() as f64 / wanted.len() as f64
}

/// Linear-interpolated percentile `q` in `[0, 100]` of `values`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return Err(Error::invalid("percentile needs values and q in [0, 100]"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Identity thresholds calibrated on clean held-out scenes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub lo: f64,
    pub hi: f64,
}

/// Same-identity similarities on clean scenes: each subject crop against a
/// crop of the same class and identity taken from another held-out scene,
/// at an independent box size and position.
pub fn same_identity_similarities(encoders: &ToyEncoders, seed: u64, scenes: usize) -> Result<Vec<f64>> {
    let mut by_look: BTreeMap<(ClassId, usize), Vec<Vec<f64>>> = BTreeMap::new();
    for i in 0..scenes as u64 {
        let s = derive_seed(seed, 0xCA1, i);
        let n = MIN_SUBJECTS + (i as usize % (MAX_SCENE_SUBJECTS - MIN_SUBJECTS + 1));
        let scene = generate_scene(s, n, LayoutMode::Uniform, Split::Eval)?;
        for sub in &scene.subjects {
            let (_, pooled) = encoders.encode_reference(&scene.canvas.crop(&sub.bbox)?)?;
            by_look.entry((sub.class, sub.identity.index())).or_default().push(pooled);
        }
    }
    let mut sims = Vec::new();
    for group in by_look.values() {
        for pair in group.windows(2) {
            sims.push(cosine(&pair[0], &pair[1]));
        }
    }
    if sims.is_empty() {
        return Err(Error::invalid("calibration found no repeated identities; use more scenes"));
    }
    Ok(sims)
}

/// `θ_lo` and `θ_hi`: the 10th and 25th percentiles of same-identity similarities.
pub fn calibrate_thresholds(encoders: &ToyEncoders, seed: u64, scenes: usize) -> Result<Thresholds> {
    let sims = same_identity_similarities(encoders, seed, scenes)?;
    Ok(Thresholds { lo: percentile(&sims, 10.0)?, hi: percentile(&sims, 25.0)? })
}
