//! Aligned multimodal bottleneck fusion for long-video scene and act
//! segmentation, with shot/synopsis synchronization and label distillation.

pub mod alignfuse;
pub mod checkpoint;
pub mod dataio;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod numcore;
pub mod sync;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
