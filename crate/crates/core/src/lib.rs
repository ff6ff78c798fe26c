//! Reconstruction of 3D CT volumes from one or two orthogonal X-ray
//! projections, trained adversarially on procedurally generated phantom
//! data.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`kernels`], [`graph`], [`nn`]: a small data-parallel
//!   tensor/autodiff core (generic over `f32`/`f64`).
//! - [`volume`], [`vio`], [`phantom`]: domain types, file formats, and
//!   the synthetic dataset generator.
//! - [`generator`], [`discriminator`], [`perceptual`], [`losses`]: the
//!   two-branch 2D-to-3D generator with Sobel edge guidance, the
//!   autoencoder-regularized conditional discriminator, and the full
//!   objective algebra.
//! - [`metrics`], [`render`]: PSNR / SSIM / NRMSE / slice-perceptual
//!   evaluation and error-map rendering.
//! - [`trainer`]: alternating optimization, the loss-scale audit,
//!   evaluation, and ablation runs.

pub mod checkpoint;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod perceptual;
pub mod phantom;
pub mod render;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod vio;
pub mod volume;

pub use error::{Error, Result};
pub use rng::SeedRng;
pub use tensor::{Scalar, Tensor};
pub use volume::{ProjectionPair, SampleRecord, ViewMode, Volume};
