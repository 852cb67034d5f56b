//! pixveil: learnable image protection with a co-trained classifier.
//!
//! The library trains an encoder-decoder transformation network that maps
//! images to visually protected forms, jointly with a residual classifier
//! that still labels the protected images accurately. It also ships the
//! inverse-network attack harness used to probe how much of the original
//! image an adversary can recover, plus the evaluation stack (accuracy,
//! PSNR distributions, box statistics, image grids) and a small
//! client/server split mirroring the intended deployment: the transform
//! stays with the client, only protected pixels ever reach the service.
//!
//! All numeric code is generic over [`Scalar`] (f32 or f64); the aliases
//! below pin the two concrete instantiations.

pub mod attack;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imageio;
pub mod losses;
pub mod models;
pub mod pipeline;
pub mod scalar;
pub mod service;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use models::{ResNet, UNet};

/// f32 instantiations — the practical training configuration.
pub type TransformNetF32 = UNet<f32>;
pub type InverseNetF32 = UNet<f32>;
pub type ClassifierF32 = ResNet<f32>;

/// f64 instantiations — used by the gradient checks and anywhere bitwise
/// agreement with double-precision oracles matters.
pub type TransformNetF64 = UNet<f64>;
pub type InverseNetF64 = UNet<f64>;
pub type ClassifierF64 = ResNet<f64>;
