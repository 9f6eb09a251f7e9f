//! Vector-quantized mixture of experts.
//!
//! The crate houses a small reverse-mode autodiff engine, a learned
//! codebook quantizer, sparse MoE layers (four router baselines plus the
//! router-free VQMoE layer), a character-level decoder-only language model,
//! routing diagnostics and a synthetic clustering testbed.

pub mod autodiff;
pub mod checkpoint;
pub mod cluster_sim;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fsutil;
pub(crate) mod kernels;
pub mod lm;
pub mod moe;
pub mod optim;
#[cfg(test)]
mod oracle;
pub mod params;
pub mod quantizer;
pub mod run;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
