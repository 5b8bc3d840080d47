//! Synthetic scenes, geodesic fields and instruction episodes.

pub mod episode;
pub mod grid;
pub mod io;
pub mod scene;

pub use episode::{sample_episode, sample_episodes, Episode, EpisodeParams, Vocab};
pub use grid::{GeodesicField, OccGrid};
pub use scene::{generate_scene, Bounds, Footprint, Scene, SceneObject, SceneParams, Wall};
