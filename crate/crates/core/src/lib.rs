//! Abdominal adipose tissue segmentation on fat-weighted volumes.
//!
//! The pipeline localizes the abdominal region with two region networks,
//! segments tissue slice-wise in three planes with competitive dense networks
//! and fuses the per-view probabilities with a small 3D aggregation network.

pub mod container;
pub mod netgraph;
pub mod error;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{LabelMap, LabelScheme, SlicePlane, Volume3D};
pub use tensor::Tensor;
