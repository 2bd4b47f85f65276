//! Efficient image-restoration transformer built around anchored stripe
//! self-attention, with a minimal dense-tensor autodiff engine, exact/anchored
//! attention kernels, diagnostics for the low-rank attention approximation,
//! and a desk-scale training harness.
//!
//! All numeric code is generic over the element type through [`Scalar`]
//! (`f32` or `f64`); concrete aliases live at the crate root. The convention
//! throughout: f64 for oracles and gradient checks, f32 for training and
//! benchmarks.

pub mod attention;
pub mod error;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, Parameter, Scalar, Tensor};

/// Single-precision tensor, the training/benchmark dtype.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, the oracle/gradient-check dtype.
pub type Tensor64 = Tensor<f64>;
/// Single-precision autodiff tape.
pub type Graph32 = Graph<f32>;
/// Double-precision autodiff tape.
pub type Graph64 = Graph<f64>;
