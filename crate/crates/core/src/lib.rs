//! Layout-controllable multi-subject diffusion on a synthetic shapes world.
//!
//! The crate is organized bottom-up:
//!
//! * [`nn`]: tensors, layers, AdamW, gradient checking and checkpoints.
//! * [`attention`]: the cross-attention layer and its four modes.
//! * [`grounding`]: box Fourier features, grounding tokens, the resampler.
//! * [`world`]: scene generator, renderer, toy encoders and dataset files.
//! * [`denoiser`]: noise schedule, patch-transformer denoiser, DDIM + CFG.
//! * [`model`]: denoiser + grounding + encoders, scene-to-bundle glue.
//! * [`trainer`]: pretraining, staged training strategies, freeze groups.
//! * [`eval`]: shape detector, layout / identity / text metrics, reports.
//! * [`config`]: the plain-text run configuration.
//! * [`verify`]: the finite-difference gradient suite.
//! * [`experiments`]: the end-to-end ablation suites.

pub mod attention;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod grounding;
pub mod model;
pub mod nn;
pub mod trainer;
pub mod verify;
pub mod world;

pub use error::{Error, Result};
