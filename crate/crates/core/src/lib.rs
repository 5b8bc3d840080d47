//! Weakly-supervised multi-granularity mapping for instruction-following
//! navigation in a synthetic continuous world.

pub mod error;
pub mod geom;
pub mod harness;
pub mod mapping;
pub mod navigator;
pub mod simulator;
pub mod supervision;
pub mod training;
pub mod world;

pub use error::{Error, Result};
pub use geom::{Point, Pose};
pub use harness::RunConfig;
pub use training::{Corpus, Trainer};

pub type AgentState32 = navigator::AgentState<f32>;
pub type TickInput32 = navigator::TickInput<f32>;
pub type BnUpdate32 = mapping::BnUpdate<f32>;
pub type ParamStore32 = mgmap_tensor::ParamStore<f32>;
