//! Desk-scale hand-object interaction video pipeline.
//!
//! The crate generates a fully synthetic tabletop manipulation corpus
//! (rendered frames plus exact 21-keypoint hand poses), trains three small
//! diffusion models on it, and scores the results with pose-consistency
//! metrics:
//!
//! 1. a coarse video planner conditioned on an instruction and an
//!    environment image,
//! 2. a motion refiner that partially re-denoises hand pose sequences
//!    extracted from the coarse video,
//! 3. a pose-conditioned regenerator that re-renders the video under the
//!    refined poses through a zero-initialized adapter on the frozen
//!    planner.
//!
//! Everything runs on CPU, is deterministic under a master seed, and is
//! sized so the full train/sample/evaluate loop finishes in minutes.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod evaluate;
pub mod graph;
pub mod manifest;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod planner;
pub mod posectrl;
pub mod rng;

pub use error::{Error, Result};

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar the numeric core is generic over.
///
/// Implemented for `f32` and `f64`; model code is instantiated at
/// [`TrainScalar`], metric and oracle code at [`MetricScalar`].
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Scalar used for model parameters, training, and sampling.
pub type TrainScalar = f32;

/// Scalar used for metrics and verification oracles.
pub type MetricScalar = f64;

/// Dynamic-rank array over the generic scalar.
pub type Arr<T> = ndarray::ArrayD<T>;
