//! Autoregressive 3D object detection from point clouds.
//!
//! Boxes are quantized into per-attribute token vocabularies, a causal
//! Transformer decoder generates them near-to-far while cross-attending to
//! bird's-eye-view point features, and the resulting detector is trained by
//! teacher forcing, optionally fine-tuned with GRPO on an IoU-F1 reward, and
//! evaluated with score-free precision/recall/F1.

pub mod autodiff;
pub mod cli;
pub mod decoding;
pub mod eval;
pub mod geometry;
pub mod grpo;
pub mod model;
pub mod refine;
pub mod scenegen;
pub mod tokenizer;
pub mod training;
