use super::Tensor;
use crate::error::{Error, Result};

/// Row-wise softmax of a matrix.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    if !m.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = m.clone();
    softmax_rows_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_rows_in_place(m: &mut Tensor) {
    let c = m.cols();
    if c == 0 {
        return;
    }
    for row in m.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Backward of row softmax: `ds = p ⊙ (dp − Σ_j dp_j p_j)`.
pub fn softmax_rows_backward(p: &Tensor, dp: &Tensor) -> Tensor {
    let c = p.cols();
    let mut ds = dp.clone();
    if c == 0 {
        return ds;
    }
    for (drow, prow) in ds.data_mut().chunks_mut(c).zip(p.data().chunks(c)) {
        let dot: f64 = drow.iter().zip(prow).map(|(d, p)| d * p).sum();
        for (d, p) in drow.iter_mut().zip(prow) {
            *d = p * (*d - dot);
        }
    }
    ds
}
