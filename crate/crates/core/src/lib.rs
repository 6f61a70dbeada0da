//! Line-guided document dewarping.
//!
//! A dense tensor engine with reverse-mode differentiation ([`autodiff`]), a
//! synthetic warped-document generator ([`geometry`]), the dual-decoder line
//! segmentation network with horizontal/vertical fusion ([`model`]), its losses
//! and optimizer ([`training`]), and rectification metrics ([`metrics`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below name the common instantiations.

pub mod autodiff;
pub mod checks;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Var32 = Var<f32>;
pub type Var64 = Var<f64>;
