use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::grounding::BoundingBox;
use crate::world::{
    generate_scene, render, ClassId, Color, IdentityPattern, Image, LayoutMode, ShapeKind, Split, SubjectSpec, ToyEncoders,
    CANVAS,
};

fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

fn det(class: u8, b: BoundingBox) -> Detection {
    Detection { bbox: b, class: ClassId(class), confidence: 1.0 }
}

fn gt(class: u8, b: BoundingBox) -> GroundTruth {
    GroundTruth { class: ClassId(class), bbox: b }
}

#[test]
fn iou_fixtures() {
    let a = bx(0.0, 0.0, 0.5, 0.5);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &bx(0.6, 0.6, 0.9, 0.9)), 0.0);
    // Touching edges share no area.
    assert_eq!(iou(&a, &bx(0.5, 0.0, 1.0, 0.5)), 0.0);
    let v = iou(&a, &bx(0.25, 0.25, 0.75, 0.75));
    assert!((v - 0.0625 / 0.4375).abs() < 1e-15);
    assert!((v - 1.0 / 7.0).abs() < 1e-15);
}

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..0.9f64, 0.0..0.9f64, 0.02..0.5f64, 0.02..0.5f64)
        .prop_map(|(x, y, w, h)| bx(x, y, (x + w).min(1.0), (y + h).min(1.0)))
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn detector_trivial_cases() {
    assert!(detect_shapes(&Image::black(32, 32)).is_empty());
    let mut img = Image::black(32, 32);
    for y in 0..32 {
        for x in 0..32 {
            img.set_pixel(x, y, [0.0, 0.0, 1.0]);
        }
    }
    let d = detect_shapes(&img);
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].class, ClassId::new(ShapeKind::Square, Color::Blue));
    assert_eq!(d[0].bbox.coords(), [0.0, 0.0, 1.0, 1.0]);
    assert_eq!(d[0].confidence, 1.0);
}

#[test]
fn detector_ignores_specks_and_dim_noise() {
    let mut img = Image::black(32, 32);
    img.set_pixel(3, 3, [1.0, 0.0, 0.0]);
    img.set_pixel(3, 4, [1.0, 0.0, 0.0]);
    img.set_pixel(20, 20, [0.15, 0.1, 0.0]);
    assert!(detect_shapes(&img).is_empty());
    assert_eq!(pixel_color([0.4, 0.0, 0.4]), Some(Color::Magenta));
    assert_eq!(pixel_color([0.9, 0.8, 0.1]), Some(Color::Yellow));
    assert_eq!(pixel_color([0.9, 0.8, 0.7]), None);
}

#[test]
fn detector_recovers_every_clean_subject() {
    for mode in [LayoutMode::Prior, LayoutMode::Uniform] {
        for seed in 0..150 {
            let scene = generate_scene(seed, 2 + (seed as usize % 5), mode, Split::Eval).unwrap();
            let dets = detect_shapes(&scene.canvas);
            assert_eq!(dets.len(), scene.subjects.len(), "seed {seed}");
            for s in &scene.subjects {
                let best = dets.iter().filter(|d| d.class == s.class).map(|d| iou(&d.bbox, &s.bbox)).fold(0.0, f64::max);
                assert!(best >= 0.9, "seed {seed}: {} best IoU {best}", s.class.name());
            }
        }
    }
}

#[test]
fn every_shape_is_classified_at_every_size() {
    for shape in ShapeKind::ALL {
        for w in 6..=16 {
            for h in 6..=16 {
                let spec = SubjectSpec {
                    class: ClassId::new(shape, Color::Green),
                    identity: IdentityPattern::Dots,
                    bbox: BoundingBox::from_pixels(2, 3, 2 + w, 3 + h, CANVAS).unwrap(),
                };
                let d = detect_shapes(&render(&[spec], CANVAS));
                assert_eq!(d.len(), 1);
                assert_eq!(d[0].class.shape(), shape, "{w}x{h}");
            }
        }
    }
}

/// Maximum number of ground-truth instances matchable above the IoU
/// threshold, over every class-respecting injective assignment.
fn brute_force_best(gt: &[GroundTruth], dets: &[Detection]) -> usize {
    fn go(i: usize, gt: &[GroundTruth], dets: &[Detection], used: &mut Vec<bool>) -> usize {
        if i == gt.len() {
            return 0;
        }
        let mut best = go(i + 1, gt, dets, used);
        for j in 0..dets.len() {
            if !used[j] && dets[j].class == gt[i].class && iou(&gt[i].bbox, &dets[j].bbox) > LAYOUT_IOU {
                used[j] = true;
                best = best.max(1 + go(i + 1, gt, dets, used));
                used[j] = false;
            }
        }
        best
    }
    go(0, gt, dets, &mut vec![false; dets.len()])
}

#[test]
fn greedy_handles_swapped_duplicates() {
    let a = bx(0.0, 0.0, 0.3, 0.3);
    let b = bx(0.5, 0.5, 0.8, 0.8);
    let g = [gt(3, a), gt(3, b)];
    let d = [det(3, bx(0.5, 0.5, 0.78, 0.8)), det(3, bx(0.0, 0.02, 0.3, 0.3))];
    let m = greedy_match(&g, &d);
    assert_eq!(m[0].unwrap().0, 1);
    assert_eq!(m[1].unwrap().0, 0);
    assert!(layout_success(&g, &d).success);
    assert_eq!(brute_force_best(&g, &d), 2);
}

#[test]
fn layout_success_thresholds() {
    let a = bx(0.0, 0.0, 0.5, 0.5);
    let b = bx(0.6, 0.6, 1.0, 1.0);
    assert!(layout_success(&[gt(1, a), gt(2, b)], &[det(1, a), det(2, b)]).success);
    // IoU 0.4 with the only same-class detection.
    let shrunk = bx(0.0, 0.0, 0.5, 0.2);
    let out = layout_success(&[gt(1, a), gt(2, b)], &[det(1, shrunk), det(2, b)]);
    assert!((out.ious[0] - 0.4).abs() < 1e-12);
    assert!(!out.success);
    // Right box, wrong class.
    assert!(!layout_success(&[gt(1, a)], &[det(2, a)]).success);
}

/// Ground-truth boxes on a pixel grid that keep a background gap, as scenes
/// do, with up to four instances of one class and perturbed detections.
fn fixture(seed: u64) -> (Vec<GroundTruth>, Vec<Detection>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rects: Vec<(usize, usize, usize, usize)> = Vec::new();
    let n = rng.gen_range(1..=4);
    while rects.len() < n {
        let (w, h) = (rng.gen_range(3..10), rng.gen_range(3..10));
        let (x, y) = (rng.gen_range(0..=32 - w), rng.gen_range(0..=32 - h));
        let r = (x, y, x + w, y + h);
        if rects.iter().all(|o| r.2 < o.0 || o.2 < r.0 || r.3 < o.1 || o.3 < r.1) {
            rects.push(r);
        }
    }
    let to_box = |r: (usize, usize, usize, usize)| BoundingBox::from_pixels(r.0, r.1, r.2, r.3, 32).unwrap();
    let class = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.8) { 7 } else { 9 };
    let gts: Vec<GroundTruth> = rects.iter().map(|&r| gt(class(&mut rng), to_box(r))).collect();
    let mut dets = Vec::new();
    for _ in 0..rng.gen_range(0..=5) {
        let base = rects[rng.gen_range(0..rects.len())];
        let j = |rng: &mut ChaCha8Rng, v: usize| (v as i64 + rng.gen_range(-2..=2)).clamp(0, 32) as usize;
        let (x0, y0) = (j(&mut rng, base.0), j(&mut rng, base.1));
        let (x1, y1) = (j(&mut rng, base.2).max(x0 + 1), j(&mut rng, base.3).max(y0 + 1));
        dets.push(det(class(&mut rng), to_box((x0, y0, x1.min(32), y1.min(32)))));
    }
    (gts, dets)
}

#[test]
fn greedy_matches_brute_force_on_fixtures() {
    let mut agree_success = 0;
    for seed in 0..3000 {
        let (g, d) = fixture(seed);
        let greedy = greedy_match(&g, &d).iter().filter(|m| m.is_some_and(|(_, v)| v > LAYOUT_IOU)).count();
        let best = brute_force_best(&g, &d);
        assert_eq!(greedy, best, "fixture {seed}");
        assert_eq!(layout_success(&g, &d).success, best == g.len());
        agree_success += (best == g.len()) as usize;
    }
    // The fixtures exercise both outcomes.
    assert!(agree_success > 100 && agree_success < 2900, "{agree_success}");
}

#[test]
fn level_report_cases() {
    let all: Vec<(usize, bool)> = (2..=6).map(|l| (l, true)).collect();
    let r = report_by_level(&all).unwrap();
    assert!(r.levels.values().all(|v| *v == Some(1.0)));

    let no_l6 = [(2, true), (3, false), (4, true), (5, true)];
    let r = report_by_level(&no_l6).unwrap();
    assert_eq!(r.levels[&6], None);
    assert_eq!(r.avg_sample_weighted, 0.75);

    // Ten known outcomes: L2 3/4, L3 1/2, L4 0/1, L5 2/3, L6 absent.
    let ten = [
        (2, true),
        (2, true),
        (2, false),
        (2, true),
        (3, true),
        (3, false),
        (4, false),
        (5, true),
        (5, false),
        (5, true),
    ];
    let r = report_by_level(&ten).unwrap();
    assert_eq!(r.levels[&2], Some(0.75));
    assert_eq!(r.levels[&3], Some(0.5));
    assert_eq!(r.levels[&4], Some(0.0));
    assert_eq!(r.levels[&5], Some(2.0 / 3.0));
    assert_eq!(r.levels[&6], None);
    assert!((r.avg_sample_weighted - 0.6).abs() < 1e-15);
    assert!((r.avg_level_weighted - (0.75 + 0.5 + 0.0 + 2.0 / 3.0) / 4.0).abs() < 1e-15);
    assert!(report_by_level(&[(7, true)]).is_err());
}

#[test]
fn identity_local_cases() {
    let enc = ToyEncoders::new(7, 16);
    let scene = generate_scene(3, 4, LayoutMode::Uniform, Split::Eval).unwrap();
    let mut same = Vec::new();
    for s in &scene.subjects {
        let r = scene.canvas.crop(&s.bbox).unwrap();
        let v = identity_local(&scene.canvas, &s.bbox, &r, &enc).unwrap();
        assert!(v >= 0.999, "{v}");
        // Same class, another identity, rendered at the same box.
        let other = IdentityPattern::ALL[(s.identity.index() + 1) % 4];
        let alt = render(&[SubjectSpec { identity: other, ..*s }], CANVAS);
        let v_other = identity_local(&alt, &s.bbox, &r, &enc).unwrap();
        let v_same = identity_local(&render(&[*s], CANVAS), &s.bbox, &r, &enc).unwrap();
        assert!(v_other < v_same, "{v_other} vs {v_same}");
        same.push(v_same);
    }
    let sims = same_identity_similarities(&enc, 1, 300).unwrap();
    let m = sims.iter().sum::<f64>() / sims.len() as f64;
    let sd = (sims.iter().map(|v| (v - m).powi(2)).sum::<f64>() / sims.len() as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for s in &scene.subjects {
        let noise = Image::from_data(CANVAS, CANVAS, (0..CANVAS * CANVAS * 3).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let r = scene.canvas.crop(&s.bbox).unwrap();
        let v = identity_local(&noise, &s.bbox, &r, &enc).unwrap();
        assert!(v < m - 3.0 * sd, "noise {v} vs same-identity {m} ± {sd}");
    }
}

#[test]
fn thresholds_and_lms_success() {
    let enc = ToyEncoders::new(7, 16);
    let t = calibrate_thresholds(&enc, 1, 300).unwrap();
    assert!(0.0 < t.lo && t.lo <= t.hi && t.hi <= 1.0, "{t:?}");
    assert!(lms_success(&[1.0, 1.0], t.lo) && lms_success(&[1.0, 1.0], t.hi));
    let below = t.lo - 0.01;
    assert!(!lms_success(&[1.0, below], t.lo) && !lms_success(&[1.0, below], t.hi));
    assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0, 5.0], 25.0).unwrap(), 2.0);
    assert_eq!(percentile(&[1.0, 2.0], 10.0).unwrap(), 1.1);
}

#[test]
fn text_align_cases() {
    let b = bx(0.0, 0.0, 0.5, 0.5);
    let prompt = [0, 1 + 4, 1 + 10, 1 + 20];
    let all = [det(4, b), det(10, b), det(20, b), det(33, b)];
    assert_eq!(text_align(&all, &prompt), 1.0);
    assert_eq!(text_align(&[], &prompt), 0.0);
    assert!((text_align(&all[..2], &prompt) - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn clean_canvases_score_perfectly_and_report_aggregates() {
    let enc = ToyEncoders::new(7, 16);
    let scenes = eval_scenes(2, 2).unwrap();
    assert_eq!(scenes.len(), 10);
    let refs: Vec<_> = scenes.iter().collect();
    let images: Vec<Image> = scenes.iter().map(|s| s.canvas.clone()).collect();
    let records = score_images(&refs, &images, &enc).unwrap();
    assert!(records.iter().all(|r| r.layout_success && r.text_align == 1.0));
    let t = Thresholds { lo: 0.9, hi: 0.95 };
    let m = seed_metrics(0, &records, t, 0.5).unwrap();
    assert_eq!(m.lms_success_hi, 1.0);
    let black: Vec<Image> = scenes.iter().map(|_| Image::black(CANVAS, CANVAS)).collect();
    let m2 = seed_metrics(1, &score_images(&refs, &black, &enc).unwrap(), t, 0.5).unwrap();
    assert_eq!(m2.layout.avg_sample_weighted, 0.0);
    let r = EvalReport::aggregate("x", t, vec![m, m2]).unwrap();
    assert_eq!(r.avg_sample_weighted, 0.5);
    assert_eq!(r.seeds, vec![0, 1]);
    let csv = EvalReport::to_csv(&[r]);
    assert!(csv.starts_with(EvalReport::CSV_HEADER));
    assert!(csv.lines().nth(1).unwrap().starts_with("x,0.5000,0.5000,"));
}
