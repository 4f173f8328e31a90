//! Higher-order regular-splitting graph networks for lifting 2D human poses
//! to 3D.
//!
//! The numerical core ([`linalg`], [`graph`], [`spectral`], [`splitting`]) is
//! generic over the floating-point type through [`Scalar`]; the learning
//! stack ([`autodiff`], [`layers`], [`model`], [`training`]) runs in `f64`.

pub mod autodiff;
pub mod data_io;
pub mod error;
pub mod graph;
pub mod layers;
pub mod linalg;
pub mod model;
pub mod params;
pub mod scalar;
pub mod spectral;
pub mod splitting;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type GraphMatrices64 = graph::GraphMatrices<f64>;
pub type GraphMatrices32 = graph::GraphMatrices<f32>;
pub type EigenDecomposition64 = spectral::EigenDecomposition<f64>;
pub type RegularSplitting64 = splitting::RegularSplitting<f64>;
pub type RegularSplitting32 = splitting::RegularSplitting<f32>;
