//! Post-training quantization of a small decoder-only transformer with
//! learnable low-rank weight rounding and block-wise output reconstruction.

pub mod config;
pub mod diag;
pub mod error;
pub mod lrq;
pub mod model;
pub mod quant;
pub mod recon;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
