pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod fsp;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod viz;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Init, ParamId, ParamStore};
pub use tensor::Tensor;
