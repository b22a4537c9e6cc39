//! Attribute prototype networks for zero-shot learning.
//!
//! This crate implements joint global/local representation learning over
//! class-level attribute vectors: a small convolutional encoder feeds a
//! global classification branch and a prototype branch that localizes
//! individual attributes in similarity maps. On top of the learned model it
//! provides zero-shot and generalized zero-shot inference with calibrated
//! stacking, weakly supervised attribute/part localization with PCP scoring,
//! and a synthetic "glyph scene" dataset with known ground truth for
//! end-to-end verification.
//!
//! Everything is built on a deliberately small tensor core with a
//! reverse-mode tape whose gradients are checked against central finite
//! differences; see the `book/` guide for a narrative tour.

pub mod attributes;
pub mod autodiff;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
