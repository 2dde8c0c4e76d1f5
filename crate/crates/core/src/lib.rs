//! Deep sampling networks: a learned down-sampler with a quantized output
//! activation, co-trained with a dense sub-pixel residual up-sampler.
//!
//! The crate carries its own small reverse-mode differentiation engine
//! ([`autodiff`]), the network layers and model ([`layers`], [`model`]),
//! classical resampling baselines ([`resample`]), image I/O and quality
//! metrics ([`imaging`]), the training loop ([`trainer`]), and a
//! compression pipeline that stores the learned low-resolution image with a
//! lossless codec ([`compression`]).

pub mod autodiff;
pub mod compression;
pub mod error;
pub mod experiments;
pub mod gradsuite;
pub mod imaging;
pub mod layers;
pub mod model;
pub mod resample;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Real, Shape, Tensor};
