//! Cross-resolution distribution matching distillation, end to end, at desk
//! scale.
//!
//! The crate distills a small rectified-flow teacher into a few-step generator
//! that samples through a multi-resolution cascade: low resolution while the
//! state is noisy, the teacher resolution once it is not.
//!
//! - [`schedule`]: logSNR/σ arithmetic, resolution shift, trajectory partitions.
//! - [`grid`]: rasters, bilinear resampling and its adjoint, seeded noise.
//! - [`net`]: a σ-conditioned convolutional velocity predictor with exact gradients.
//! - [`data`]: procedural two-tier shape dataset.
//! - [`diffusion`]: flow-matching teacher training and Euler sampling.
//! - [`cascade`]: cascaded inference state machine and its differentiable rollout.
//! - [`rmd`]: the distillation losses and training loop.
//! - [`evalsuite`]: MMD, summary statistics, analytic cost model, reports.
//! - [`config`] / [`pipeline`]: run configuration, presets and commands.

pub mod cascade;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evalsuite;
pub mod grid;
pub mod net;
pub mod pipeline;
pub mod rmd;
pub mod schedule;

pub use error::{Error, Result};
