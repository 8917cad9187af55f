//! Masked discrete diffusion with look-back self-correction.
//!
//! A denoiser predicts clean tokens for masked positions; a correction head
//! scores already-committed tokens so the decoder can remask likely errors
//! and revisit them later.

pub mod artifacts;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod head;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
