//! Conditional image augmentation with a Wasserstein-GP adversarial U-Net.
//!
//! The generator is a residual U-Net that encodes a real conditioning image,
//! concatenates a projected Gaussian latent at the bottleneck and decodes
//! through skip connections. A DenseNet critic scores `(reference, candidate)`
//! pairs. Everything is built on the small reverse-mode engine in [`graph`],
//! which supports the second-order path the gradient penalty needs.

pub mod adam;
pub mod critic;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod par;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::ParameterStore;
pub use tensor::{Float, Tensor};
