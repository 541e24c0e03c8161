//! CAFT: hierarchical image-text representation learning at desk scale.
//!
//! Aligns sub-captions with mid-level visual segments and whole captions
//! with global image features, trained with sigmoid contrastive losses and
//! evaluated by retrieval recall and zero-shot grounding mIoU.

pub mod align;
pub mod config;
pub mod eval;
pub mod nn;
pub mod params;
pub mod stream;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vision;

pub use tensor::{Tensor, TensorError};
