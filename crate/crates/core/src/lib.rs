//! Desk-scale latent-video diffusion with dual-path noise prediction.
//!
//! The engine denoises short latent video clips conditioned on a first-frame
//! latent. Noise prediction runs along two paths: an analytic image-noise
//! prior obtained by one-step backward diffusion against the condition frame,
//! and a learned residual network; the two are merged per frame either by a
//! linearly decaying weight or by an attention-based fusion module.
//!
//! Everything runs on a small reverse-mode autodiff tensor engine (`f32` by
//! default, `f64` for verification), with deterministic, seed-reproducible
//! training, DDIM sampling and evaluation.

pub mod config;
pub mod conv;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod fusion;
pub mod io;
pub mod ops;
pub mod optim;
pub mod prior;
pub mod scalar;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::Tape;
pub use tensor::Tensor;
