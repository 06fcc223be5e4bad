//! Decoder-free referring segmentation from a miniature multimodal
//! transformer, end to end on the CPU in f64.
//!
//! A vision encoder's patch features are pixel-shuffle-compressed before the
//! language model sees them; that compression is what caps mask quality in
//! dot-product segmentation heads. This crate implements and ablates the
//! machinery that wins the resolution back without a specialist decoder:
//!
//! * a self-replicated compression branch that keeps the uncompressed grid,
//! * residual refilling of LLM-processed features onto that grid,
//! * MLP-with-pixel-unshuffle expansion that amplifies the residual above
//!   the encoder's own resolution,
//! * a segmentation-aware attention mask with image-to-image and
//!   image-to-query visibility,
//! * a single-token dot-product mask head trained with text, BCE, and DICE
//!   losses on a synthetic referring-expression corpus.
//!
//! Everything runs on a small reverse-mode autodiff engine
//! ([`autograd`]) whose gradients are finite-difference-checked, so every
//! claim in the [`checks`] suite and the acceptance tests is mechanically
//! verifiable. See the `book/` guide for a narrative walkthrough.

pub mod autograd;
pub mod checks;
pub mod cli;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod seg;
pub mod shuffle;
pub mod train;

mod guide;

pub use autograd::{grad_check, GradMap, Graph, ParamSet, Tensor};
pub use config::RunConfig;
pub use model::{build_attention_mask, MaskVariant, ModelConfig, TokenLayout, ToyModel};
pub use seg::{MlpSharing, PipelineMode, Retention, SegPipeline};
pub use shuffle::{GridFeatures, Mlp, ShuffleSpec};
