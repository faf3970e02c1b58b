//! Question-guided attention for visual question answering.
//!
//! A question is encoded by an LSTM into a dense embedding, which configures
//! a convolution kernel. Correlating that kernel with a grid of image cell
//! features and normalizing yields an attention map over the grid; the
//! attention-weighted features, the raw features and the question embedding
//! are fused to predict a single-word answer.

pub mod answer;
pub mod attention;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
mod params;
pub mod shapeworld;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use gradcheck::grad_check;
pub use graph::{Activation, Graph, Var};
pub use tensor::Tensor;
