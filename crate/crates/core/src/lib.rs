//! Class-dropping debiasing for semantic segmentation, built on a small
//! reverse-mode autodiff engine, with a synthetic biased-scene benchmark and
//! bias-analysis protocols.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod dropclass;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod io;
mod kernels;
pub mod manifest;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use kernels::Padding;
pub use model::{Model, ModelConfig};
pub use tensor::{LabelMap, Tensor, IGNORE_LABEL};
