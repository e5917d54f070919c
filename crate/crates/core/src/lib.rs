//! Class-embedding decoding for semantic segmentation with heatmap-guided
//! bidirectional interaction between pixel features and category embeddings.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tensor`]), the interaction layer ([`hbis`]), the segmentation model
//! ([`model`]), training objective ([`losses`]), evaluation ([`metrics`]),
//! synthetic data ([`data`]) and the training loop ([`train`]).

// `!(x > 0.0)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod hbis;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
