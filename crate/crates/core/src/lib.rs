//! Adverse-weather augmentation of LiDAR scenes: range-image codec,
//! VQ/LQ quantized autoencoder, FiLM-conditioned latent diffusion with
//! partial noising, depth-threshold postprocessing, and CD/JSD metrics,
//! plus a synthetic paired clear/snow dataset generator.

pub mod config;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod postprocess;
pub mod quantize;
pub mod range_codec;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
