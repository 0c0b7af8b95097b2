//! Promptable ViT segmentation of retinal OCT fluid with low-rank
//! adaptation.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`model`]: image encoder, prompt encoder and per-class mask decoder
//! - [`lora`]: query/value adapters, merging and trainable-set auditing
//! - [`prompts`]: click and box simulation from reference masks
//! - [`training`]: CE + Dice objective, learning-rate schedule, AdamW loop
//! - [`metrics`]: volumetric Dice, absolute volume difference, reports
//! - [`inference`]: whole-volume prediction, automatic or click-driven
//! - [`data`]: volume/mask files, RLE wire masks, synthetic datasets
//! - [`checkpoint`]: tensor archives for full models and adapters
//! - [`serving`]: sessions with an image-embedding cache

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod inference;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod serving;
pub mod training;

pub use error::{Error, Result};
pub use lora::{inject_lora, LoraState, Regimen, TrainableOptions};
pub use model::{ClassLogits, ImageEmbedding, ModelConfig, PromptSet, SegmentationModel};
