//! Configuration, metrics, evaluation runs and grid dumps.

pub mod config;
pub mod eval;
pub mod grid;
pub mod metrics;

pub use config::RunConfig;
pub use eval::{run_episode, run_eval, Agent, Report};
pub use grid::Grid;
pub use metrics::{
    aggregate, evaluate_episode, localization_iou, spl, waypoint_hit_rate, Aggregate, EpisodeResult,
};
