//! Multimodal EHR foundation model: a structured-timeline encoder fused
//! with demographics and notes, a cross-attention decoder, self-supervised
//! pretraining objectives, multi-task fine-tuning and evaluation metrics,
//! all on a small reverse-mode autodiff engine.

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod gradsuite;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
