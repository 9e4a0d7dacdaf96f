use rand::Rng;

use super::activation::{silu_backward, silu_tensor};
use super::param::{Module, Parameter};
use super::{Linear, Tensor};
use crate::error::{Error, Result};

/// Three linear layers with SiLU after the first two.
#[derive(Clone, Debug)]
pub struct MlpSiLU {
    pub layers: [Linear; 3],
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    x: Tensor,
    pre1: Tensor,
    act1: Tensor,
    pre2: Tensor,
    act2: Tensor,
}

impl MlpSiLU {
    pub fn new(name: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            layers: [
                Linear::new(&format!("{name}.0"), d_in, d_hidden, true, rng),
                Linear::new(&format!("{name}.1"), d_hidden, d_hidden, true, rng),
                Linear::new(&format!("{name}.2"), d_hidden, d_out, true, rng),
            ],
        }
    }

    pub fn zeros(name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            layers: [
                Linear::zeros(&format!("{name}.0"), d_in, d_hidden, true),
                Linear::zeros(&format!("{name}.1"), d_hidden, d_hidden, true),
                Linear::zeros(&format!("{name}.2"), d_hidden, d_out, true),
            ],
        }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers[2].d_out()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        if x.cols() != self.d_in() {
            return Err(Error::shape(format!(
                "mlp expects {} input features, got {}",
                self.d_in(),
                x.cols()
            )));
        }
        let pre1 = self.layers[0].forward(x)?;
        let act1 = silu_tensor(&pre1);
        let pre2 = self.layers[1].forward(&act1)?;
        let act2 = silu_tensor(&pre2);
        let y = self.layers[2].forward(&act2)?;
        Ok((y, MlpCache { x: x.clone(), pre1, act1, pre2, act2 }))
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &Tensor) -> Result<Tensor> {
        let d_act2 = self.layers[2].backward(&cache.act2, dy)?;
        let d_pre2 = silu_backward(&cache.pre2, &d_act2);
        let d_act1 = self.layers[1].backward(&cache.act1, &d_pre2)?;
        let d_pre1 = silu_backward(&cache.pre1, &d_act1);
        self.layers[0].backward(&cache.x, &d_pre1)
    }

    pub fn requires_grad(&self) -> bool {
        self.layers.iter().any(Linear::requires_grad)
    }
}

impl Module for MlpSiLU {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for l in &self.layers {
            l.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::activation::silu;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_mlp_gives_zero() {
        let mlp = MlpSiLU::zeros("m", 3, 5, 2);
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 3.0, 3.0]]).unwrap();
        assert_eq!(mlp.forward(&x).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn unit_identity_layers_map_zero_to_zero() {
        let mut mlp = MlpSiLU::zeros("m", 1, 1, 1);
        for l in &mut mlp.layers {
            l.weight.value.data_mut()[0] = 1.0;
        }
        let y = mlp.forward(&Tensor::zeros(&[1, 1])).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = MlpSiLU::new("m", 4, 6, 2, &mut rng);
        assert!(mlp.forward(&Tensor::zeros(&[1, 3])).is_err());
    }

    /// Forward pass written out with explicit loops.
    fn reference_forward(mlp: &MlpSiLU, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (li, l) in mlp.layers.iter().enumerate() {
            let (din, dout) = (l.d_in(), l.d_out());
            let w = l.weight.value.data();
            let b = l.bias.as_ref().unwrap().value.data();
            let mut next = vec![0.0; dout];
            for j in 0..dout {
                let mut s = b[j];
                for i in 0..din {
                    s += h[i] * w[i * dout + j];
                }
                next[j] = if li < 2 { silu(s) } else { s };
            }
            h = next;
        }
        h
    }

    #[test]
    fn matches_reference_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = MlpSiLU::new("m", 5, 7, 3, &mut rng);
        let xs = vec![vec![0.3, -1.2, 0.8, 2.0, -0.1], vec![1.0, 1.0, -1.0, 0.0, 0.5]];
        let y = mlp.forward(&Tensor::from_rows(&xs).unwrap()).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        for (i, x) in xs.iter().enumerate() {
            let want = reference_forward(&mlp, x);
            for (a, b) in y.row(i).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
