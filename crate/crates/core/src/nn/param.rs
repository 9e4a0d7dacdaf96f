use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

/// A named learnable tensor with its gradient slot.
///
/// `grad` is `None` until a backward pass (or [`Parameter::zero_grad`])
/// populates it. A frozen parameter never receives gradient updates and is
/// skipped by the optimizer.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self { name: name.into(), value, grad: None, trainable: true, frozen: false }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// True when gradients should be accumulated and the optimizer may step it.
    pub fn requires_grad(&self) -> bool {
        self.trainable && !self.frozen
    }

    pub fn zero_grad(&mut self) {
        if self.requires_grad() {
            match &mut self.grad {
                Some(g) => g.data_mut().iter_mut().for_each(|v| *v = 0.0),
                None => self.grad = Some(Tensor::zeros(self.value.shape())),
            }
        } else {
            self.grad = None;
        }
    }

    /// Gradient buffer, allocated on first use.
    pub fn grad_mut(&mut self) -> &mut Tensor {
        let shape = self.value.shape().to_vec();
        self.grad.get_or_insert_with(|| Tensor::zeros(&shape))
    }

    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        if !self.requires_grad() {
            return Ok(());
        }
        if g.shape() != self.value.shape() {
            return Err(Error::shape(format!(
                "gradient for `{}` has shape {:?}, expected {:?}",
                self.name,
                g.shape(),
                self.value.shape()
            )));
        }
        self.grad_mut().add_assign(g)
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name().to_string()));
        names
    }

    /// Sets the frozen flag of every parameter from a predicate on its name.
    fn set_frozen_by(&mut self, pred: &dyn Fn(&str) -> bool) {
        self.visit_params_mut(&mut |p| p.frozen = pred(p.name()));
    }

    /// Whether any parameter would receive gradients.
    fn any_requires_grad(&self) -> bool {
        let mut any = false;
        self.visit_params(&mut |p| any |= p.requires_grad());
        any
    }
}

impl Module for Parameter {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(self)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(self)
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for m in self {
            m.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for m in self {
            m.visit_params_mut(f);
        }
    }
}

/// Gaussian init with the given standard deviation.
pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Uniform init in `[-bound, bound]`.
pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}
