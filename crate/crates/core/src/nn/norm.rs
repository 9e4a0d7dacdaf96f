use super::param::{Module, Parameter};
use super::Tensor;
use crate::error::{Error, Result};

const EPS: f64 = 1e-5;

/// Layer normalization over the last dimension with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub shift: Parameter,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gain: Parameter::new(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            shift: Parameter::new(format!("{name}.shift"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        let d = self.gain.value.len();
        if x.cols() != d {
            return Err(Error::shape(format!("layernorm over {d}, input has {}", x.cols())));
        }
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut y = x.clone();
        let (g, b) = (self.gain.value.data(), self.shift.value.data());
        for (row, out) in xhat.data_mut().chunks_mut(d).zip(y.data_mut().chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for ((h, o), (gi, bi)) in row.iter_mut().zip(out.iter_mut()).zip(g.iter().zip(b)) {
                *h = (*h - mean) * inv;
                *o = *h * gi + bi;
            }
            inv_std.push(inv);
        }
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Tensor) -> Result<Tensor> {
        let d = self.gain.value.len();
        if self.gain.requires_grad() || self.shift.requires_grad() {
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            for (dyr, hr) in dy.data().chunks(d).zip(cache.xhat.data().chunks(d)) {
                for j in 0..d {
                    dg[j] += dyr[j] * hr[j];
                    db[j] += dyr[j];
                }
            }
            self.gain.accumulate(&Tensor::from_vec(&[d], dg)?)?;
            self.shift.accumulate(&Tensor::from_vec(&[d], db)?)?;
        }
        let g = self.gain.value.data();
        let mut dx = dy.clone();
        for ((dxr, hr), &inv) in dx.data_mut().chunks_mut(d).zip(cache.xhat.data().chunks(d)).zip(&cache.inv_std) {
            let mut mean_dh = 0.0;
            let mut mean_dh_h = 0.0;
            for j in 0..d {
                let dh = dxr[j] * g[j];
                mean_dh += dh;
                mean_dh_h += dh * hr[j];
            }
            mean_dh /= d as f64;
            mean_dh_h /= d as f64;
            for j in 0..d {
                let dh = dxr[j] * g[j];
                dxr[j] = inv * (dh - mean_dh - hr[j] * mean_dh_h);
            }
        }
        Ok(dx)
    }
}

impl Module for LayerNorm {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.gain);
        f(&self.shift);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gain);
        f(&mut self.shift);
    }
}
