//! Scaled dot-product attention shared by every attention variant.

use std::borrow::Cow;

use super::softmax::{softmax_rows_backward, softmax_rows_in_place};
use super::Tensor;
use crate::error::{Error, Result};

/// Row-stochastic attention weights, one matrix per head.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub heads: Vec<Tensor>,
}

/// `softmax(q kᵀ / √d_head) v`, split across `heads` column groups.
///
/// With zero keys the result is all zeros and the weights are empty.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, AttentionWeights)> {
    check_dims(q, k, v, heads)?;
    let (lq, d) = (q.rows(), q.cols());
    let dv = v.cols();
    let mut out = Tensor::zeros(&[lq, dv]);
    if k.rows() == 0 {
        return Ok((out, AttentionWeights { heads: Vec::new() }));
    }
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = split(q, k, v, h, dh, dvh, heads);
        let mut s = qh.matmul_nt(&kh)?;
        s.data_mut().iter_mut().for_each(|x| *x *= scale);
        softmax_rows_in_place(&mut s);
        let o = s.matmul(&vh)?;
        if heads == 1 {
            out = o;
        } else {
            out.set_cols(h * dvh, &o);
        }
        weights.push(s);
    }
    Ok((out, AttentionWeights { heads: weights }))
}

/// Gradients `(dq, dk, dv)` of [`attend`].
pub fn attend_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    w: &AttentionWeights,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let heads = w.heads.len().max(1);
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    if k.rows() == 0 {
        return Ok((dq, dk, dv));
    }
    let (dh, dvh) = (q.cols() / heads, v.cols() / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    for (h, p) in w.heads.iter().enumerate() {
        let (qh, kh, vh) = split(q, k, v, h, dh, dvh, heads);
        let doh = if heads == 1 {
            Cow::Borrowed(dout)
        } else {
            Cow::Owned(dout.slice_cols(h * dvh, (h + 1) * dvh))
        };
        let dp = doh.matmul_nt(&vh)?;
        let dvh_t = p.matmul_tn(&doh)?;
        let mut ds = softmax_rows_backward(p, &dp);
        ds.data_mut().iter_mut().for_each(|x| *x *= scale);
        let dqh = ds.matmul(&kh)?;
        let dkh = ds.matmul_tn(&qh)?;
        if heads == 1 {
            return Ok((dqh, dkh, dvh_t));
        }
        dq.set_cols(h * dh, &dqh);
        dk.set_cols(h * dh, &dkh);
        dv.set_cols(h * dvh, &dvh_t);
    }
    Ok((dq, dk, dv))
}

fn check_dims(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<()> {
    if heads == 0 || !q.cols().is_multiple_of(heads) || !v.cols().is_multiple_of(heads) {
        return Err(Error::shape(format!(
            "{heads} heads do not divide query dim {} / value dim {}",
            q.cols(),
            v.cols()
        )));
    }
    if k.cols() != q.cols() {
        return Err(Error::shape(format!("key dim {} != query dim {}", k.cols(), q.cols())));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(format!("{} keys but {} values", k.rows(), v.rows())));
    }
    Ok(())
}

type HeadViews<'a> = (Cow<'a, Tensor>, Cow<'a, Tensor>, Cow<'a, Tensor>);

fn split<'a>(
    q: &'a Tensor,
    k: &'a Tensor,
    v: &'a Tensor,
    h: usize,
    dh: usize,
    dvh: usize,
    heads: usize,
) -> HeadViews<'a> {
    if heads == 1 {
        return (Cow::Borrowed(q), Cow::Borrowed(k), Cow::Borrowed(v));
    }
    (
        Cow::Owned(q.slice_cols(h * dh, (h + 1) * dh)),
        Cow::Owned(k.slice_cols(h * dh, (h + 1) * dh)),
        Cow::Owned(v.slice_cols(h * dvh, (h + 1) * dvh)),
    )
}
