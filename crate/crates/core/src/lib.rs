//! Text-conditioned scene-layout generation with rectified flow.

pub mod conditioning;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod flow;
pub mod layout;
pub mod metrics;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
pub use layout::{BoundingBox, DatasetStats, Layout, ObjectToken, TokenMatrix};
