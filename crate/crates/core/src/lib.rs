//! Controllable semantic inpainting.
//!
//! A context encoder maps the observed pixels of an image to a small set of
//! disentangled latent factors; a bidirectional PixelCNN then completes the
//! unobserved region pixel by pixel, conditioned on those factors and on the
//! surrounding context in every direction.

pub mod bipixelcnn;
pub mod checkpoint;
pub mod dataset;
pub mod diagnostics;
pub mod dlm;
pub mod error;
pub mod maskedconv;
pub mod model;
pub mod ndgrad;
pub mod nn;
pub mod regobjectives;
pub mod service;
#[cfg(test)]
pub(crate) mod testutil;
pub mod trainer;
pub mod vaecore;

pub use error::{Error, Result};
