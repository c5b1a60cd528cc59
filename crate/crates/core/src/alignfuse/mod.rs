//! Multimodal shot encoder with alignment positional encoding and
//! bottleneck fusion tokens.

mod block;
mod config;
mod model;

pub use block::{EncoderBlock, LayerNorm, Linear};
pub use config::{align_index, align_indices, ModelConfig};
pub use model::{Encoded, FusionModel, ModalityParams};
