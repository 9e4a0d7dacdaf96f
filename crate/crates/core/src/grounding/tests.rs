use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::activation::silu;

const R2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

fn toy_config(style: ImageGroundingStyle) -> GroundingConfig {
    GroundingConfig {
        d_text: 5,
        d_img: 6,
        freq_count: 4,
        mlp_hidden: 7,
        resampler_depth: 1,
        resampler_ff_mult: 2,
        style,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn subject(seed: u64, cfg: &GroundingConfig, b: BoundingBox) -> SubjectCondition {
    let mut r = rng(seed);
    SubjectCondition {
        class_feature: normal_tensor(&mut r, &[cfg.d_text], 1.0).into_data(),
        patch_tokens: normal_tensor(&mut r, &[3, cfg.d_img], 1.0),
        bbox: b,
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn fourier_default_is_64_dims() {
    let f = fourier_embed(&bx(0.1, 0.2, 0.7, 0.9), DEFAULT_FREQ_COUNT).unwrap();
    assert_eq!(f.len(), 64);
}

#[test]
fn fourier_unit_box() {
    let f = fourier_embed(&bx(0.0, 0.0, 1.0, 1.0), 16).unwrap();
    for (coord, c) in [0.0, 0.0, 1.0, 1.0].into_iter().enumerate() {
        for j in 0..8 {
            let (s, co) = (f[coord * 16 + 2 * j], f[coord * 16 + 2 * j + 1]);
            assert!(s.abs() < 1e-12);
            let want = if c == 1.0 && j == 0 { -1.0 } else { 1.0 };
            assert!((co - want).abs() < 1e-12, "coord {coord} j {j}: {co}");
        }
    }
}

#[test]
fn fourier_hand_table() {
    // (sin, cos) of 2^j·π·c for j = 0..7, by hand.
    let tail = |from: usize| std::iter::repeat_n([0.0, 1.0], 8 - from);
    let quarter: Vec<[f64; 2]> = [[R2, R2], [1.0, 0.0], [0.0, -1.0]].into_iter().chain(tail(3)).collect();
    let half: Vec<[f64; 2]> = [[1.0, 0.0], [0.0, -1.0]].into_iter().chain(tail(2)).collect();
    let zero: Vec<[f64; 2]> = tail(0).collect();
    let one: Vec<[f64; 2]> = [[0.0, -1.0]].into_iter().chain(tail(1)).collect();
    let want: Vec<f64> = [quarter, zero, half, one].concat().concat();
    let got = fourier_embed(&bx(0.25, 0.0, 0.5, 1.0), 16).unwrap();
    assert!(close(&got, &want, 1e-12), "{got:?}");
}

#[test]
fn fourier_rejects_bad_inputs() {
    let b = bx(0.1, 0.1, 0.5, 0.5);
    assert!(fourier_embed(&b, 3).is_err());
    assert!(fourier_embed(&b, 0).is_err());
    let outside = BoundingBox { x0: -0.1, y0: 0.0, x1: 0.5, y1: 0.5 };
    assert!(fourier_embed(&outside, 16).is_err());
    assert!(BoundingBox::new(0.5, 0.1, 0.5, 0.9).is_err());
    assert!(BoundingBox::new(0.1, 0.1, 1.2, 0.9).is_err());
}

proptest! {
    #[test]
    fn fourier_bounded(x0 in 0.0..0.5f64, y0 in 0.0..0.5f64, w in 0.01..0.5f64, h in 0.01..0.5f64, k in 1usize..10) {
        let b = bx(x0, y0, x0 + w, y0 + h);
        let f = fourier_embed(&b, 2 * k).unwrap();
        prop_assert_eq!(f.len(), 8 * k);
        prop_assert!(f.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn text_grounding_zero_mlp_gives_zero() {
    let mlp = MlpSiLU::zeros("m", 5 + 16, 4, 5);
    let t = build_text_grounding(&[0.3; 5], &bx(0.1, 0.1, 0.4, 0.6), &mlp, 4).unwrap();
    assert_eq!(t, vec![0.0; 5]);
    assert!(build_text_grounding(&[0.3; 4], &bx(0.1, 0.1, 0.4, 0.6), &mlp, 4).is_err());
}

/// Reference MLP evaluated with explicit loops.
fn reference_mlp(mlp: &MlpSiLU, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (li, l) in mlp.layers.iter().enumerate() {
        let w = &l.weight.value;
        let b = l.bias.as_ref().unwrap().value.data();
        h = (0..w.cols())
            .map(|j| {
                let z = b[j] + h.iter().enumerate().map(|(i, v)| v * w.data()[i * w.cols() + j]).sum::<f64>();
                if li < 2 {
                    silu(z)
                } else {
                    z
                }
            })
            .collect();
    }
    h
}

#[test]
fn text_grounding_at_full_width() {
    let mlp = MlpSiLU::new("m", 768 + 64, 16, 768, &mut rng(1));
    let f_t = normal_tensor(&mut rng(2), &[768], 1.0).into_data();
    let b = bx(0.2, 0.3, 0.6, 0.8);
    let got = build_text_grounding(&f_t, &b, &mlp, 16).unwrap();
    let mut input = f_t.clone();
    input.extend(fourier_embed(&b, 16).unwrap());
    assert_eq!(input.len(), 832);
    assert_eq!(got.len(), 768);
    assert!(close(&got, &reference_mlp(&mlp, &input), 1e-12));
}

#[test]
fn image_grounding_composition_and_additivity() {
    let box_mlp = MlpSiLU::new("b", 16, 5, 6, &mut rng(3));
    let tokens = normal_tensor(&mut rng(4), &[4, 6], 1.0);
    let other = normal_tensor(&mut rng(5), &[4, 6], 1.0);
    let b = bx(0.1, 0.5, 0.3, 0.9);
    let g = build_image_grounding(&tokens, &b, &box_mlp, 4).unwrap();
    let emb = reference_mlp(&box_mlp, &fourier_embed(&b, 4).unwrap());
    for j in 0..4 {
        let want: Vec<f64> = tokens.row(j).iter().zip(&emb).map(|(t, e)| t + e).collect();
        assert!(close(g.row(j), &want, 1e-12));
    }
    // The box embedding cancels between two token sets under the same box.
    let g2 = build_image_grounding(&other, &b, &box_mlp, 4).unwrap();
    let lhs = g.sub(&g2).unwrap();
    let rhs = tokens.sub(&other).unwrap();
    assert!(lhs.max_abs_diff(&rhs) < 1e-12);

    // Same tokens, different boxes: blocks differ only by the box embeddings.
    let b2 = bx(0.6, 0.0, 0.9, 0.4);
    let g3 = build_image_grounding(&tokens, &b2, &box_mlp, 4).unwrap();
    let emb2 = reference_mlp(&box_mlp, &fourier_embed(&b2, 4).unwrap());
    for j in 0..4 {
        let d: Vec<f64> = g.row(j).iter().zip(g3.row(j)).map(|(a, c)| a - c).collect();
        let want: Vec<f64> = emb.iter().zip(&emb2).map(|(a, c)| a - c).collect();
        assert!(close(&d, &want, 1e-12));
    }

    let zero = MlpSiLU::zeros("z", 16, 5, 6);
    assert_eq!(build_image_grounding(&tokens, &b, &zero, 4).unwrap(), tokens);
    assert!(build_image_grounding(&tokens, &b, &MlpSiLU::zeros("z", 16, 5, 7), 4).is_err());
}

#[test]
fn concat_grounding_oracle() {
    let mlp = MlpSiLU::new("c", 6 + 16, 5, 6, &mut rng(6));
    let tokens = normal_tensor(&mut rng(7), &[4, 6], 1.0);
    let b = bx(0.3, 0.3, 0.7, 0.5);
    let out = build_concat_image_grounding(&tokens, &b, &mlp, 4).unwrap();
    let f = fourier_embed(&b, 4).unwrap();
    for j in 0..4 {
        let mut input = tokens.row(j).to_vec();
        input.extend_from_slice(&f);
        assert!(close(out.row(j), &reference_mlp(&mlp, &input), 1e-12));
    }

    let same = Tensor::from_rows(&vec![tokens.row(0).to_vec(); 4]).unwrap();
    let out = build_concat_image_grounding(&same, &b, &mlp, 4).unwrap();
    for j in 1..4 {
        assert_eq!(out.row(j), out.row(0));
    }
    let zero = MlpSiLU::zeros("z", 22, 5, 6);
    let z = build_concat_image_grounding(&tokens, &b, &zero, 4).unwrap();
    assert!(z.data().iter().all(|v| *v == 0.0));
}

fn padded(cfg: &GroundingConfig, boxes: &[BoundingBox]) -> PaddedConditions {
    let subjects: Vec<SubjectCondition> = boxes.iter().enumerate().map(|(i, b)| subject(10 + i as u64, cfg, *b)).collect();
    pad_and_dropout(&subjects, 0.0, 0).unwrap()
}

#[test]
fn module_shapes_and_padding() {
    for style in [ImageGroundingStyle::Additive, ImageGroundingStyle::Concatenated] {
        let cfg = toy_config(style);
        let m = GroundingModule::new(cfg, &mut rng(8));
        let conds = padded(&cfg, &[bx(0.0, 0.0, 0.5, 0.5), bx(0.5, 0.5, 1.0, 1.0)]);
        let (g, _) = m.forward(&conds, true, true).unwrap();
        assert_eq!(g.text.shape(), &[MAX_SUBJECTS, cfg.d_text]);
        assert_eq!(g.image.shape(), &[MAX_SUBJECTS * IMAGE_TOKENS_PER_SUBJECT, cfg.d_img]);
        for i in 2..MAX_SUBJECTS {
            assert_eq!(g.text.row(i), m.empty_text.value.data());
            for j in 0..4 {
                let want: Vec<f64> = m
                    .empty_image
                    .value
                    .row(j)
                    .iter()
                    .zip(m.empty_box.value.data())
                    .map(|(a, b)| a + b)
                    .collect();
                assert_eq!(g.image.row(i * 4 + j), &want[..]);
            }
        }
        let (g, _) = m.forward(&conds, false, false).unwrap();
        assert_eq!(g.text.rows(), 0);
        assert_eq!(g.image.rows(), 0);
    }
}

#[test]
fn module_matches_builders() {
    let cfg = toy_config(ImageGroundingStyle::Additive);
    let m = GroundingModule::new(cfg, &mut rng(9));
    let conds = padded(&cfg, &[bx(0.1, 0.2, 0.4, 0.5), bx(0.5, 0.1, 0.9, 0.6), bx(0.2, 0.6, 0.5, 0.95)]);
    let (g, _) = m.forward(&conds, true, true).unwrap();
    for (i, s) in conds.slots.iter().enumerate().take(3) {
        let s = s.as_ref().unwrap();
        let t = build_text_grounding(&s.class_feature, &s.bbox, &m.text_mlp, cfg.freq_count).unwrap();
        assert!(close(g.text.row(i), &t, 1e-12));
        let tokens = m.resampler.forward(&s.patch_tokens).unwrap().0;
        let gi = build_image_grounding(&tokens, &s.bbox, &m.box_mlp, cfg.freq_count).unwrap();
        assert!(g.image.slice_rows(4 * i, 4 * i + 4).max_abs_diff(&gi) < 1e-12);
    }

    let cfg = toy_config(ImageGroundingStyle::Concatenated);
    let m = GroundingModule::new(cfg, &mut rng(9));
    let (g, _) = m.forward(&conds, false, true).unwrap();
    let s = conds.slots[1].as_ref().unwrap();
    let tokens = m.resampler.forward(&s.patch_tokens).unwrap().0;
    let gi = build_concat_image_grounding(&tokens, &s.bbox, &m.concat_mlp, cfg.freq_count).unwrap();
    assert!(g.image.slice_rows(4, 8).max_abs_diff(&gi) < 1e-12);
}

#[test]
fn full_width_shape_contract() {
    let cfg = GroundingConfig {
        d_text: 768,
        d_img: 2048,
        freq_count: DEFAULT_FREQ_COUNT,
        mlp_hidden: 8,
        resampler_depth: 1,
        resampler_ff_mult: 1,
        style: ImageGroundingStyle::Additive,
    };
    let m = GroundingModule::new(cfg, &mut rng(10));
    assert_eq!((m.text_mlp.d_in(), m.text_mlp.d_out()), (768 + 64, 768));
    let conds = padded(&cfg, &[bx(0.1, 0.1, 0.5, 0.5)]);
    let (g, _) = m.forward(&conds, true, true).unwrap();
    assert_eq!(g.text.shape(), &[10, 768]);
    assert_eq!(g.image.shape(), &[40, 2048]);
    assert_eq!(g.image.slice_rows(0, IMAGE_TOKENS_PER_SUBJECT).shape(), &[4, 2048]);
}

#[test]
fn dropout_extremes_and_determinism() {
    let cfg = toy_config(ImageGroundingStyle::Additive);
    let subjects = vec![subject(1, &cfg, bx(0.0, 0.0, 0.5, 0.5))];
    for seed in 0..200 {
        let keep = pad_and_dropout(&subjects, 0.0, seed).unwrap();
        assert!(!keep.caption_dropped && !keep.conditions_dropped);
        assert_eq!(keep.present_count(), 1);
        let drop = pad_and_dropout(&subjects, 1.0, seed).unwrap();
        assert!(drop.caption_dropped && drop.conditions_dropped);
        assert_eq!(drop.present_count(), 0);
        assert_eq!(drop.slots.len(), MAX_SUBJECTS);
        assert_eq!(pad_and_dropout(&subjects, 0.5, seed).unwrap(), pad_and_dropout(&subjects, 0.5, seed).unwrap());
    }
    assert!(pad_and_dropout(&[], 0.1, 0).is_err());
    assert!(pad_and_dropout(&subjects, 1.5, 0).is_err());
}

#[test]
fn dropout_rate_monte_carlo() {
    let cfg = toy_config(ImageGroundingStyle::Additive);
    let subjects = vec![subject(1, &cfg, bx(0.0, 0.0, 0.5, 0.5))];
    let n = 10_000;
    let (mut caption, mut cond) = (0, 0);
    for seed in 0..n {
        let p = pad_and_dropout(&subjects, 0.1, seed).unwrap();
        caption += p.caption_dropped as usize;
        cond += p.conditions_dropped as usize;
    }
    for count in [caption, cond] {
        let rate = count as f64 / n as f64;
        assert!((0.09..=0.11).contains(&rate), "rate {rate}");
    }
}

#[test]
fn overflow_keeps_largest_boxes() {
    let cfg = toy_config(ImageGroundingStyle::Additive);
    let subjects: Vec<SubjectCondition> =
        (0..12).map(|i| subject(i, &cfg, bx(0.0, 0.0, 0.05 + 0.05 * i as f64, 0.5))).collect();
    let p = pad_and_dropout(&subjects, 0.0, 3).unwrap();
    assert_eq!(p.present_count(), MAX_SUBJECTS);
    let widths: Vec<f64> = p.slots.iter().map(|s| s.as_ref().unwrap().bbox.width()).collect();
    assert!(widths.iter().all(|w| *w > 0.14));
}

#[test]
fn dropped_conditions_yield_all_empty_tokens() {
    let cfg = toy_config(ImageGroundingStyle::Additive);
    let m = GroundingModule::new(cfg, &mut rng(11));
    let subjects = vec![subject(1, &cfg, bx(0.0, 0.0, 0.5, 0.5))];
    let p = pad_and_dropout(&subjects, 1.0, 0).unwrap();
    let (g, _) = m.forward(&p, true, true).unwrap();
    for i in 0..MAX_SUBJECTS {
        assert_eq!(g.text.row(i), m.empty_text.value.data());
    }
}

#[test]
fn iou_hand_geometry() {
    let a = bx(0.0, 0.0, 0.5, 0.5);
    let b = bx(0.25, 0.25, 0.75, 0.75);
    assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-15);
    assert_eq!(a.iou(&a), 1.0);
    assert_eq!(a.iou(&bx(0.6, 0.6, 0.9, 0.9)), 0.0);
}
