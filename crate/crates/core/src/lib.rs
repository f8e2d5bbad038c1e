//! Quantized low-rank fine-tuning of a small decoder-only transformer for
//! short-answer grading and grade-conditioned feedback generation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
