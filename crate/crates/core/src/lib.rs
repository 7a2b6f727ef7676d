//! Collaborative GAN inversion on a desk-scale style-based generator.
//!
//! The crate bundles a small reverse-mode autodiff engine, a frozen
//! style-based generator, a random-feature perceptual distance, an
//! optimization-based latent iterator, a two-encoder embedding network and
//! the training loop in which the encoder initializes the iterator while the
//! iterator's best results supervise the encoder.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod editing;
pub mod embed;
pub mod error;
pub mod experiments;
pub mod generator;
pub mod image;
pub mod iterator;
pub mod metrics;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod perceptual;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use generator::{Generator, GeneratorConfig, LatentCode};
pub use image::Image;
pub use perceptual::PerceptualNet;
pub use tensor::{Scalar, Tensor};
