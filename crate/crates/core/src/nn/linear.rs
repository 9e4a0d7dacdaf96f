use rand::Rng;

use super::param::{uniform_tensor, Module, Parameter};
use super::tensor::{accumulate_tn, Tensor};
use crate::error::{Error, Result};

/// `y = x · W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Linear {
    /// Uniform init in `±1/√in`.
    pub fn new(name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let weight = Parameter::new(format!("{name}.weight"), uniform_tensor(rng, &[d_in, d_out], bound));
        let bias = bias.then(|| {
            Parameter::new(format!("{name}.bias"), uniform_tensor(rng, &[d_out], bound))
        });
        Self { weight, bias }
    }

    pub fn zeros(name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self::from_parts(name, Tensor::zeros(&[d_in, d_out]), bias.then(|| Tensor::zeros(&[d_out])))
    }

    pub fn from_parts(name: &str, weight: Tensor, bias: Option<Tensor>) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: bias.map(|b| Parameter::new(format!("{name}.bias"), b)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.d_in() {
            return Err(Error::shape(format!(
                "{}: input has {} features, expected {}",
                self.weight.name(),
                x.cols(),
                self.d_in()
            )));
        }
        let mut y = x.matmul(&self.weight.value)?;
        if let Some(b) = &self.bias {
            y.add_row_broadcast(b.value.data())?;
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        self.backward_params(x, dy);
        dy.matmul_nt(&self.weight.value)
    }

    /// Accumulates parameter gradients only.
    pub fn backward_params(&mut self, x: &Tensor, dy: &Tensor) {
        if self.weight.requires_grad() && x.rows() > 0 {
            accumulate_tn(self.weight.grad_mut(), x, dy);
        }
        if let Some(b) = &mut self.bias {
            if b.requires_grad() {
                let s = dy.sum_rows();
                for (g, v) in b.grad_mut().data_mut().iter_mut().zip(s) {
                    *g += v;
                }
            }
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.weight.requires_grad() || self.bias.as_ref().is_some_and(Parameter::requires_grad)
    }
}

impl Module for Linear {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}
