//! A small from-scratch deep-learning stack built around MDMLP, an all-MLP
//! image classifier that mixes the height, width, channel and token axes of
//! overlapping patch embeddings, and MDAttnTool, an MLP attention field that
//! reweights input pixels.
//!
//! Layers of the crate, bottom up:
//!
//! - [`tensor`]: dense row-major tensors and kernels.
//! - [`patch`]: overlapping patch geometry and extraction.
//! - [`autograd`]: define-by-run tape and reverse sweep; [`gradcheck`] compares
//!   it against central differences.
//! - [`nn`]: linear, layer norm, GELU, dropout, MLP branch.
//! - [`model`] and [`attn`]: the architecture, parameter and MAC counters,
//!   heatmap export.
//! - [`data`], [`train`], [`checkpoint`]: CIFAR ingestion, augmentation,
//!   the SGD training loop and its on-disk state. [`rng`] keys every random
//!   stream by seed and position.

pub mod attn;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod nn;
pub mod params;
pub mod patch;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
