use super::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Attention written out per query with explicit loops.
fn naive_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> =
                k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let exps: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut out = vec![0.0; v[0].len()];
            for (e, vj) in exps.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += e / z * x;
                }
            }
            out
        })
        .collect()
}

fn project(rows: &[Vec<f64>], w: &Linear) -> Vec<Vec<f64>> {
    let wt = &w.weight.value;
    rows.iter()
        .map(|r| {
            (0..wt.cols())
                .map(|j| r.iter().enumerate().map(|(i, x)| x * wt.data()[i * wt.cols() + j]).sum())
                .collect()
        })
        .collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn cfg(mode: AttentionMode, lambda: f64) -> CrossAttentionConfig {
    CrossAttentionConfig { d_model: 3, d_text: 2, d_img: 4, d_h: 2, heads: 1, lambda, mode }
}

fn layer(mode: AttentionMode, lambda: f64, seed: u64) -> CrossAttentionLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = CrossAttentionLayer::new("ca", &cfg(mode, lambda), &mut rng);
    // Distinct grounding projections so the terms are distinguishable.
    for w in [&mut l.w_kt, &mut l.w_vt, &mut l.w_ki, &mut l.w_vi] {
        let shape = w.weight.value.shape().to_vec();
        w.weight.value = crate::nn::param::uniform_tensor(&mut rng, &shape, 0.9);
    }
    l
}

fn mat(r: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn x2() -> Tensor {
    mat(&[&[0.5, -1.0, 0.25], &[1.5, 0.75, -0.5]])
}

fn text3() -> Tensor {
    mat(&[&[1.0, 0.0], &[-0.5, 2.0], &[0.3, 0.3]])
}

fn gt2() -> Tensor {
    mat(&[&[0.2, -1.1], &[1.4, 0.6]])
}

fn gi4() -> Tensor {
    mat(&[&[0.1, 0.2, -0.3, 0.4], &[1.0, -1.0, 0.5, 0.0], &[0.0, 0.3, 0.3, 0.9], &[-0.7, 0.1, 0.2, 0.2]])
}

fn assert_close(a: &Tensor, b: &[Vec<f64>], tol: f64) {
    assert_eq!(a.rows(), b.len());
    for (i, row) in b.iter().enumerate() {
        for (x, y) in a.row(i).iter().zip(row) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }
}

#[test]
fn single_key_returns_its_value() {
    let l = layer(AttentionMode::Ca, 0.8, 1);
    let text = mat(&[&[0.7, -0.2]]);
    let out = l.compute_ca(&mat(&[&[1.0, 2.0, 3.0]]), &text).unwrap();
    let v = project(&rows(&text), &l.w_v);
    assert_close(&out, &v, 1e-12);
}

#[test]
fn identical_keys_average_their_values() {
    let mut l = layer(AttentionMode::Ca, 0.8, 2);
    // Rows 0 and 1 of the prompt map to the same key but different values.
    l.w_k.weight.value = mat(&[&[1.0, 0.5], &[1.0, 0.5]]);
    let text = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let out = l.compute_ca(&x2(), &text).unwrap();
    let v = project(&rows(&text), &l.w_v);
    let mean: Vec<f64> = v[0].iter().zip(&v[1]).map(|(a, b)| (a + b) / 2.0).collect();
    assert_close(&out, &[mean.clone(), mean], 1e-12);
}

#[test]
fn ca_matches_hand_oracle() {
    let l = layer(AttentionMode::Ca, 0.8, 3);
    let (x, t) = (x2(), text3());
    let q = project(&rows(&x), &l.w_q);
    let want = naive_attention(&q, &project(&rows(&t), &l.w_k), &project(&rows(&t), &l.w_v));
    assert_close(&l.compute_ca(&x, &t).unwrap(), &want, 1e-9);
}

#[test]
fn ca_requires_text() {
    let l = layer(AttentionMode::Ca, 0.8, 3);
    assert!(l.compute_ca(&x2(), &Tensor::empty_rows(2)).is_err());
}

#[test]
fn dca_reductions_are_bit_exact() {
    let (x, t, gi) = (x2(), text3(), gi4());
    let l0 = layer(AttentionMode::DcaLayout, 0.0, 4);
    assert_eq!(l0.compute_dca(&x, &t, &gi).unwrap(), l0.compute_ca(&x, &t).unwrap());
    let l = layer(AttentionMode::DcaLayout, 0.8, 4);
    assert_eq!(l.compute_dca(&x, &t, &Tensor::empty_rows(4)).unwrap(), l.compute_ca(&x, &t).unwrap());
}

#[test]
fn dca_is_sum_of_two_terms() {
    let l = layer(AttentionMode::DcaLayout, 0.8, 5);
    let (x, t, gi) = (x2(), text3(), gi4());
    let q = project(&rows(&x), &l.w_q);
    let text_term = naive_attention(&q, &project(&rows(&t), &l.w_k), &project(&rows(&t), &l.w_v));
    let img_term = naive_attention(&q, &project(&rows(&gi), &l.w_ki), &project(&rows(&gi), &l.w_vi));
    let want: Vec<Vec<f64>> = text_term
        .iter()
        .zip(&img_term)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + 0.8 * y).collect())
        .collect();
    assert_close(&l.compute_dca(&x, &t, &gi).unwrap(), &want, 1e-9);
}

#[test]
fn cca_with_empty_grounding_is_ca() {
    let l = layer(AttentionMode::Cca, 0.8, 6);
    let (x, t) = (x2(), text3());
    assert_eq!(l.compute_cca(&x, &t, &Tensor::empty_rows(2)).unwrap(), l.compute_ca(&x, &t).unwrap());
    assert!(l.compute_cca(&x, &Tensor::empty_rows(2), &Tensor::empty_rows(2)).is_err());
}

#[test]
fn cca_identical_keys_average_text_and_grounding_values() {
    let mut l = layer(AttentionMode::Cca, 0.8, 7);
    l.w_kt.weight.value = l.w_k.weight.value.clone();
    let tok = mat(&[&[0.4, -0.9]]);
    let out = l.compute_cca(&x2(), &tok, &tok).unwrap();
    let v = project(&rows(&tok), &l.w_v)[0].clone();
    let vt = project(&rows(&tok), &l.w_vt)[0].clone();
    let mean: Vec<f64> = v.iter().zip(&vt).map(|(a, b)| (a + b) / 2.0).collect();
    assert_close(&out, &[mean.clone(), mean], 1e-12);
}

fn cca_oracle(l: &CrossAttentionLayer, x: &Tensor, t: &Tensor, gt: &Tensor) -> Vec<Vec<f64>> {
    let q = project(&rows(x), &l.w_q);
    let mut k = project(&rows(t), &l.w_k);
    k.extend(project(&rows(gt), &l.w_kt));
    let mut v = project(&rows(t), &l.w_v);
    v.extend(project(&rows(gt), &l.w_vt));
    naive_attention(&q, &k, &v)
}

#[test]
fn cca_matches_joint_softmax_oracle() {
    let l = layer(AttentionMode::Cca, 0.8, 8);
    let (x, t, gt) = (x2(), text3().slice_rows(0, 2), gt2());
    assert_close(&l.compute_cca(&x, &t, &gt).unwrap(), &cca_oracle(&l, &x, &t, &gt), 1e-9);
}

#[test]
fn fca_reductions_and_oracle() {
    let (x, t, gt, gi) = (x2(), text3(), gt2(), gi4());
    let full = ConditionBundle { text: t.clone(), grounding_text: gt.clone(), grounding_image: gi.clone() };

    let l = layer(AttentionMode::Fca, 0.8, 9);
    let only_text = ConditionBundle::empty(2, 4);
    let only_text = ConditionBundle { text: t.clone(), ..only_text };
    assert_eq!(l.compute_fca(&x, &only_text).unwrap(), l.compute_ca(&x, &t).unwrap());

    let l0 = layer(AttentionMode::Fca, 0.0, 9);
    assert_eq!(l0.compute_fca(&x, &full).unwrap(), l0.compute_cca(&x, &t, &gt).unwrap());
    let no_gt = ConditionBundle { grounding_text: Tensor::empty_rows(2), ..full.clone() };
    assert_eq!(l0.compute_fca(&x, &no_gt).unwrap(), l0.compute_ca(&x, &t).unwrap());

    let q = project(&rows(&x), &l.w_q);
    let joint = cca_oracle(&l, &x, &t, &gt);
    let img = naive_attention(&q, &project(&rows(&gi), &l.w_ki), &project(&rows(&gi), &l.w_vi));
    let want: Vec<Vec<f64>> =
        joint.iter().zip(&img).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + 0.8 * y).collect()).collect();
    assert_close(&l.compute_fca(&x, &full).unwrap(), &want, 1e-9);
}

#[test]
fn forward_dispatch_matches_named_ops() {
    let (x, t, gt, gi) = (x2(), text3(), gt2(), gi4());
    let b = ConditionBundle { text: t.clone(), grounding_text: gt.clone(), grounding_image: gi.clone() };
    let l = layer(AttentionMode::Fca, 0.6, 10);
    assert_eq!(l.forward(&x, &b).unwrap().0, l.compute_fca(&x, &b).unwrap());
    let mut c = l.clone();
    c.mode = AttentionMode::Cca;
    assert_eq!(c.forward(&x, &b).unwrap().0, l.compute_cca(&x, &t, &gt).unwrap());
    c.mode = AttentionMode::Ca;
    assert_eq!(c.forward(&x, &b).unwrap().0, l.compute_ca(&x, &t).unwrap());
    assert_eq!(c.forward(&x, &ConditionBundle::empty(2, 4)).unwrap().0, Tensor::zeros(&[2, 2]));
}

#[test]
fn cca_normalizes_jointly_while_dca_normalizes_separately() {
    let (x, t, gt) = (x2(), text3(), gt2());
    let b = ConditionBundle { text: t, grounding_text: gt, grounding_image: Tensor::empty_rows(4) };

    let cca = layer(AttentionMode::Cca, 0.8, 11);
    let (_, cache) = cca.forward(&x, &b).unwrap();
    let w = cache.term_weights();
    assert_eq!(w.len(), 1);
    assert_eq!(w[0].heads[0].cols(), 5);
    for i in 0..2 {
        let row = w[0].heads[0].row(i);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Text columns alone do not sum to one: grounding keys took mass.
        assert!(row[..3].iter().sum::<f64>() < 1.0 - 1e-6);
    }

    let dca = layer(AttentionMode::DcaLayout, 0.8, 11);
    let (_, cache) = dca.forward(&x, &b).unwrap();
    let w = cache.term_weights();
    assert_eq!(w.len(), 2);
    assert_eq!((w[0].heads[0].cols(), w[1].heads[0].cols()), (3, 2));
    for term in w {
        for i in 0..2 {
            assert!((term.heads[0].row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn lambda_outside_unit_interval_is_rejected() {
    let l = layer(AttentionMode::Fca, 1.5, 12);
    let b = ConditionBundle { text: text3(), grounding_text: gt2(), grounding_image: gi4() };
    assert!(l.forward(&x2(), &b).is_err());
}

#[test]
fn multi_head_splits_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = CrossAttentionConfig { d_model: 3, d_text: 2, d_img: 4, d_h: 4, heads: 2, lambda: 0.8, mode: AttentionMode::Ca };
    let l = CrossAttentionLayer::new("mh", &cfg, &mut rng);
    let (x, t) = (x2(), text3());
    let out = l.compute_ca(&x, &t).unwrap();
    let q = project(&rows(&x), &l.w_q);
    let k = project(&rows(&t), &l.w_k);
    let v = project(&rows(&t), &l.w_v);
    for h in 0..2 {
        let pick = |m: &Vec<Vec<f64>>| m.iter().map(|r| r[2 * h..2 * h + 2].to_vec()).collect::<Vec<_>>();
        let want = naive_attention(&pick(&q), &pick(&k), &pick(&v));
        assert_close(&out.slice_cols(2 * h, 2 * h + 2), &want, 1e-12);
    }
}

proptest! {
    #[test]
    fn grounding_order_is_irrelevant(seed in 0u64..1000, perm_seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let l = layer(AttentionMode::Cca, 0.8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        let gt = crate::nn::param::uniform_tensor(&mut rng, &[4, 2], 1.5);
        let mut order: Vec<usize> = (0..4).collect();
        order.shuffle(&mut rng);
        let permuted = Tensor::from_rows(&order.iter().map(|&i| gt.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = l.compute_cca(&x2(), &text3(), &gt).unwrap();
        let b = l.compute_cca(&x2(), &text3(), &permuted).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
