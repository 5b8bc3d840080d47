//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Training uses
//! `f32`; gradient checks run the identical kernels in `f64`.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use adam::AdamState;
pub use error::{Result, TensorError};
pub use graph::{BatchStats, Graph, Var, PROB_FLOOR};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type Adam32 = AdamState<f32>;
