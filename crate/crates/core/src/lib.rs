//! Local learning on SVD-factored weights.
//!
//! Every layer is stored as orthonormal factors `U`, singular values `S`
//! and `V^T`. Each layer updates its own factors from a fixed random
//! projection of the output error plus alignment and orthogonality
//! penalties, with left/right factor gradients projected onto the tangent
//! space of the Stiefel manifold. Backpropagation, direct feedback
//! alignment and the sign-concordant feedback variants are implemented on
//! the same network code for comparison, together with diagnostics that
//! measure how well each method's updates agree with true gradients.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

pub mod diagnostics;
pub mod error;
pub mod feedback;
pub mod harness;
pub mod learning;
pub mod model;
pub mod numerics;
pub mod objectives;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision.
pub type Matrix32 = numerics::Matrix<f32>;
/// Diagnostics and test precision.
pub type Matrix64 = numerics::Matrix<f64>;
pub type Network32 = model::Network<f32>;
pub type Network64 = model::Network<f64>;
pub type FactoredWeight32 = model::FactoredWeight<f32>;
pub type FactoredWeight64 = model::FactoredWeight<f64>;
