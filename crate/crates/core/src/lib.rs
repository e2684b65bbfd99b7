//! Synthetic hard-negative generation for image-text matching.
//!
//! Positive captions are parsed into scene graphs, key words are masked and
//! refilled by an image-conditioned masked language model, and the resulting
//! sentences train a small cross-modal matcher alongside retrieved negatives
//! and two word-level auxiliary tasks.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod generator;
pub mod model;
pub mod nn;
pub mod scenegraph;
pub mod text;
pub mod training;

pub use error::{Error, Result};
