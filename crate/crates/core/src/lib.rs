//! Dynamic fractional skipping: per-input, per-block choice between skipping
//! a residual block, running it at low bitwidth, or running it in full.

pub mod analytics;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod executor;
pub mod gate;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod quant;
pub mod tensor;
pub mod trainer;

pub use error::{DfsError, Result};
pub use graph::{Graph, Var};
pub use model::DfsModel;
pub use params::{ParamId, ParamStore};
pub use quant::BitOption;
pub use tensor::Tensor;
