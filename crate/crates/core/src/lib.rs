//! Token-level vision labels for multimodal training data.
//!
//! Two labeling pipelines (OCR image-to-label and rendered label-to-image),
//! the DV-SFT loss family with Vision Smoothing, a desk-scale model that
//! trains with it, and an OCR evaluation harness.

pub mod config;
pub mod doc_render;
pub mod dv_loss;
pub mod error;
pub mod eval_harness;
pub mod font;
pub mod instructions;
pub mod label_align;
pub mod manifest;
pub mod patch_grid;
pub mod records;
pub mod tokenizer;
pub mod toy_model;
pub mod util;

pub use error::{Error, Result};
