//! Training and inference stack for fully weight-binarized transformer
//! language models: latent-weight binarized linear layers trained with a
//! straight-through estimator, autoregressive distillation against a
//! full-precision teacher, stability instrumentation, and a bit-packed
//! 1-bit inference path.

pub mod bitpack;
pub mod bytesio;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod trainer;
pub mod experiment;
pub mod fbi_linear;
pub mod model;
pub mod params;
pub mod reference;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
