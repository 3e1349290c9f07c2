//! Selective super-resolution of images: a pyramid transformer classifies
//! non-overlapping tiles by object presence, only positive tiles run through a
//! deep refinement stack, and the rest are upscaled from shallow features.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`image`]: image planes, PNM codecs, bicubic resampling, synthetic scenes
//! - [`tiling`]: tile partition/regroup and pyramid object-presence labels
//! - [`nn`]: neural primitives with analytic forward/backward passes
//! - [`selector`]: the tile-selection network and its loss/metrics
//! - [`refiner`]: dual-path tile refinement (deep PTR / shallow NTR)
//! - [`train`]: the joint training loop, optimizer, checkpoints, inference
//! - [`metrics`]: PSNR/SSIM and feature-space distribution distances
//! - [`cost`]: analytic parameter/MAC accounting and selective-compute savings
//!
//! All numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the
//! pipeline runs in `f32` (see [`Real`]) while gradient checks instantiate the
//! same code at `f64`.

pub mod cost;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod refiner;
pub mod selector;
pub mod tiling;
pub mod train;

pub use error::{Error, Result};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

/// Scalar type for all numeric kernels: `f32` for the pipeline, `f64` for
/// gradient checks.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + serde::Serialize
    + 'static
{
    /// Error function, used by the exact-erf GELU.
    fn erf(self) -> Self;
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite literal")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite value")
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Storage scalar of the shipped pipeline and of every on-disk tensor payload.
pub type Real = f32;

/// Scalar used by the finite-difference gradient-check harness.
pub type Checked = f64;
