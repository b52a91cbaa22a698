//! Generative appearance mixture models for semi-supervised video object
//! segmentation, with the surrounding recurrent network, a reverse-mode
//! autodiff engine, a procedural video generator and J/F evaluation.

pub mod appearance;
pub mod config;
pub mod error;
pub mod gradsuite;
pub mod graph;
pub mod io;
pub mod kv;
pub mod metrics;
pub mod pipeline;
pub mod segnet;
pub mod synthvos;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
