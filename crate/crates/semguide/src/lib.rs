//! Semantic-guided multi-label pattern classification.
//!
//! The pipeline has two trained stages. A residual classifier with spatial
//! group-wise enhancement produces per-class activation maps; a learnable
//! five-layer transposed-convolution stack upsamples those maps into an
//! image-resolution semantic embedding, which is concatenated with the RGB
//! channels and classified by a split-attention network. A procedural
//! wild-background pattern dataset with severe label imbalance drives
//! training, and per-label precision-recall AUC drives evaluation.

pub mod archive;
pub mod cam;
pub mod classifier;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod nn;
pub mod cli;
pub mod config;
pub mod pipeline;
pub mod plots;
pub mod training;

pub use error::{Error, Result};
