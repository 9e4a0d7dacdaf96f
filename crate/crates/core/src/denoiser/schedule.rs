use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-β DDPM noise schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    /// `ᾱ_t = ∏_{s ≤ t} (1 − β_s)`.
    pub alphas_cumprod: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl DiffusionSchedule {
    pub fn new(cfg: ScheduleConfig) -> Result<Self> {
        let n = cfg.timesteps;
        if n < 2 || !(0.0 < cfg.beta_start && cfg.beta_start < cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Config(format!("invalid noise schedule {cfg:?}")));
        }
        let betas: Vec<f64> =
            (0..n).map(|i| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64).collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_cumprod })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside 0..{}", self.timesteps())))
    }

    /// `ᾱ` after a DDIM step to `t_prev`; `None` is the clean end point, `ᾱ = 1`.
    pub fn alpha_bar_prev(&self, t_prev: Option<usize>) -> Result<f64> {
        t_prev.map_or(Ok(1.0), |t| self.alpha_bar(t))
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        q_sample_with(x0, self.alpha_bar(t)?, eps)
    }

    /// DDIM (η = 0) update from `t` to `t_prev`, optionally clipping the
    /// predicted clean image to the pixel range.
    pub fn ddim_step(&self, x_t: &[f64], eps: &[f64], t: usize, t_prev: Option<usize>, clip: bool) -> Result<Vec<f64>> {
        if t_prev.is_some_and(|p| p >= t) {
            return Err(Error::invalid(format!("DDIM step must move backwards: {t} -> {t_prev:?}")));
        }
        let (a, a_prev) = (self.alpha_bar(t)?, self.alpha_bar_prev(t_prev)?);
        if clip {
            ddim_update_clipped(x_t, eps, a, a_prev)
        } else {
            ddim_update(x_t, eps, a, a_prev)
        }
    }

    /// Descending timesteps visited by an `steps`-step DDIM run: a uniform
    /// stride `T / steps` starting at 0.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let n = self.timesteps();
        if steps == 0 || steps > n {
            return Err(Error::invalid(format!("DDIM steps must be in 1..={n}, got {steps}")));
        }
        let stride = n / steps;
        Ok((0..steps).rev().map(|i| i * stride).collect())
    }
}

pub fn q_sample_with(x0: &[f64], alpha_bar: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::shape(format!("x0 has {} values, noise has {}", x0.len(), eps.len())));
    }
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// `x0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, then `x_prev = √ᾱ_prev·x0 + √(1−ᾱ_prev)·ε̂`.
pub fn ddim_update(x_t: &[f64], eps: &[f64], alpha_bar_t: f64, alpha_bar_prev: f64) -> Result<Vec<f64>> {
    if x_t.len() != eps.len() {
        return Err(Error::shape(format!("x_t has {} values, ε̂ has {}", x_t.len(), eps.len())));
    }
    if alpha_bar_t <= 0.0 {
        return Err(Error::invalid("DDIM step with ᾱ_t = 0"));
    }
    let (st, nt) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    let (sp, np) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    Ok(x_t
        .iter()
        .zip(eps)
        .map(|(x, e)| {
            let x0 = (x - nt * e) / st;
            sp * x0 + np * e
        })
        .collect())
}

/// [`ddim_update`] with `x0` clamped to `[-1, 1]` and `ε̂` re-derived from
/// the clamped `x0`.
pub fn ddim_update_clipped(x_t: &[f64], eps: &[f64], alpha_bar_t: f64, alpha_bar_prev: f64) -> Result<Vec<f64>> {
    if x_t.len() != eps.len() {
        return Err(Error::shape(format!("x_t has {} values, ε̂ has {}", x_t.len(), eps.len())));
    }
    if alpha_bar_t <= 0.0 || alpha_bar_t >= 1.0 {
        return Err(Error::invalid("clipped DDIM step needs 0 < ᾱ_t < 1"));
    }
    let (st, nt) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    let (sp, np) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    Ok(x_t
        .iter()
        .zip(eps)
        .map(|(x, e)| {
            let x0 = ((x - nt * e) / st).clamp(-1.0, 1.0);
            sp * x0 + np * (x - st * x0) / nt
        })
        .collect())
}

/// Classifier-free guidance, `ε_u + w·(ε_c − ε_u)`.
pub fn cfg_combine(eps_uncond: &[f64], eps_cond: &[f64], w: f64) -> Result<Vec<f64>> {
    if eps_uncond.len() != eps_cond.len() {
        return Err(Error::shape("guidance inputs differ in length"));
    }
    Ok(eps_uncond.iter().zip(eps_cond).map(|(u, c)| u + w * (c - u)).collect())
}
