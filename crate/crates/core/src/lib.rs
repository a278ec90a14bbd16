#![cfg_attr(not(feature = "std"), no_std)]
//! Light-field neural rendering.
//!
//! A target ray is rendered from epipolar samples in nearby reference
//! views by a two-stage attention network: one transformer aggregates the
//! samples along each epipolar line, a second one aggregates the resulting
//! per-view features. The crate also carries the geometry, encodings,
//! training loop, metrics and interpretability tools built around it.

extern crate alloc;

pub mod autodiff;
pub mod encoding;
pub mod error;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod model;
pub mod render;
pub mod sampler;
pub mod scene;
pub mod synthetic;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
