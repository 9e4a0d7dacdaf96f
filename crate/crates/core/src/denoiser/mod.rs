//! Pixel-space diffusion: noise schedule, the patch-transformer noise
//! predictor whose cross-attention runs in any attention mode, and DDIM
//! sampling with classifier-free guidance.

mod net;
mod sampler;
mod schedule;

pub use net::{patchify, position_table, timestep_table, unpatchify, Block, DenoiserConfig, DenoiserNet, GroundingGrads, NetCache};
pub use sampler::{initial_noise, sample_image, sample_images, SampleOutput, SamplerConfig};
pub use schedule::{cfg_combine, ddim_update, ddim_update_clipped, q_sample_with, DiffusionSchedule, ScheduleConfig};

use crate::attention::ConditionBundle;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Mean squared error between predicted and true noise, and its gradient
/// with respect to the prediction.
pub fn noise_mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let n = pred.len() as f64;
    let diff = pred.sub(target)?;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

/// Single-image noise prediction.
pub fn predict_noise(net: &DenoiserNet, x_t: &[f64], t: usize, bundle: &ConditionBundle) -> Result<Vec<f64>> {
    let x = Tensor::from_vec(&[1, x_t.len()], x_t.to_vec())?;
    Ok(net.forward(&x, &[t], &[bundle])?.0.into_data())
}
