//! Learnable-query resampler: a fixed set of query tokens attends over a
//! variable number of patch tokens through a stack of perceiver layers.

use rand::Rng;

use crate::attention::IMAGE_TOKENS_PER_SUBJECT;
use crate::error::{Error, Result};
use crate::nn::activation::{silu_backward, silu_tensor};
use crate::nn::param::normal_tensor;
use crate::nn::{attend, attend_backward, AttentionWeights, Linear, Module, Parameter, Tensor};

/// `lat ← lat + W_o·attn(lat W_q, p W_k, p W_v)`, then `lat ← lat + FF(lat)`.
#[derive(Clone, Debug)]
pub struct PerceiverLayer {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Clone, Debug)]
struct LayerCache {
    lat_in: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    weights: AttentionWeights,
    attn: Tensor,
    lat_mid: Tensor,
    ff_pre: Tensor,
    ff_act: Tensor,
}

impl PerceiverLayer {
    fn new(name: &str, d: usize, ff_mult: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_q: Linear::new(&format!("{name}.w_q"), d, d, false, rng),
            w_k: Linear::new(&format!("{name}.w_k"), d, d, false, rng),
            w_v: Linear::new(&format!("{name}.w_v"), d, d, false, rng),
            w_o: Linear::new(&format!("{name}.w_o"), d, d, true, rng),
            ff_in: Linear::new(&format!("{name}.ff_in"), d, d * ff_mult, true, rng),
            ff_out: Linear::new(&format!("{name}.ff_out"), d * ff_mult, d, true, rng),
        }
    }

    fn forward(&self, lat: &Tensor, patches: &Tensor) -> Result<(Tensor, LayerCache)> {
        let q = self.w_q.forward(lat)?;
        let k = self.w_k.forward(patches)?;
        let v = self.w_v.forward(patches)?;
        let (attn, weights) = attend(&q, &k, &v, 1)?;
        let lat_mid = lat.add(&self.w_o.forward(&attn)?)?;
        let ff_pre = self.ff_in.forward(&lat_mid)?;
        let ff_act = silu_tensor(&ff_pre);
        let out = lat_mid.add(&self.ff_out.forward(&ff_act)?)?;
        let cache = LayerCache { lat_in: lat.clone(), q, k, v, weights, attn, lat_mid, ff_pre, ff_act };
        Ok((out, cache))
    }

    /// Returns `(d_lat_in, d_patches)`.
    fn backward(&mut self, c: &LayerCache, patches: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor)> {
        let d_act = self.ff_out.backward(&c.ff_act, dout)?;
        let d_pre = silu_backward(&c.ff_pre, &d_act);
        let mut d_mid = dout.add(&self.ff_in.backward(&c.lat_mid, &d_pre)?)?;
        let d_attn = self.w_o.backward(&c.attn, &d_mid)?;
        let (dq, dk, dv) = attend_backward(&c.q, &c.k, &c.v, &c.weights, &d_attn)?;
        d_mid.add_assign(&self.w_q.backward(&c.lat_in, &dq)?)?;
        let mut d_patches = self.w_k.backward(patches, &dk)?;
        d_patches.add_assign(&self.w_v.backward(patches, &dv)?)?;
        Ok((d_mid, d_patches))
    }
}

impl Module for PerceiverLayer {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for l in [&self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.ff_in, &self.ff_out] {
            l.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for l in [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o, &mut self.ff_in, &mut self.ff_out] {
            l.visit_params_mut(f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Resampler {
    pub queries: Parameter,
    pub layers: Vec<PerceiverLayer>,
}

#[derive(Clone, Debug)]
pub struct ResamplerCache {
    patches: Tensor,
    layers: Vec<LayerCache>,
}

impl Resampler {
    pub fn new(name: &str, d_img: usize, depth: usize, ff_mult: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (d_img as f64).sqrt();
        let queries = Parameter::new(
            format!("{name}.queries"),
            normal_tensor(rng, &[IMAGE_TOKENS_PER_SUBJECT, d_img], std),
        );
        let layers = (0..depth).map(|i| PerceiverLayer::new(&format!("{name}.layers.{i}"), d_img, ff_mult, rng)).collect();
        Self { queries, layers }
    }

    pub fn d_img(&self) -> usize {
        self.queries.value.cols()
    }

    /// Compresses `P × d_img` patch tokens into `4 × d_img`.
    pub fn forward(&self, patches: &Tensor) -> Result<(Tensor, ResamplerCache)> {
        if patches.rows() == 0 {
            return Err(Error::invalid("resampler needs at least one patch token"));
        }
        if patches.cols() != self.d_img() {
            return Err(Error::shape(format!(
                "patch tokens have {} features, resampler expects {}",
                patches.cols(),
                self.d_img()
            )));
        }
        let mut lat = self.queries.value.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, c) = layer.forward(&lat, patches)?;
            caches.push(c);
            lat = next;
        }
        Ok((lat, ResamplerCache { patches: patches.clone(), layers: caches }))
    }

    /// Accumulates gradients; the patch tokens come from a frozen encoder so
    /// their gradient is discarded.
    pub fn backward(&mut self, cache: &ResamplerCache, dout: &Tensor) -> Result<()> {
        let mut d = dout.clone();
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers).rev() {
            d = layer.backward(c, &cache.patches, &d)?.0;
        }
        self.queries.accumulate(&d)
    }

    pub fn requires_grad(&self) -> bool {
        self.any_requires_grad()
    }
}

impl Module for Resampler {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.queries);
        self.layers.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.queries);
        self.layers.visit_params_mut(f);
    }
}
