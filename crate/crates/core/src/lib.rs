//! Multiplicative mixed models.
//!
//! A linear mixed model extended with one product of a random effect and a
//! fixed effect: per-group regression slopes on the fixed-effect pattern, so
//! a mean parameter also enters the covariance. The crate fits these models
//! by exact maximum likelihood through the Laplace objective (exact for
//! Gaussian data), and provides the downstream inference: likelihood-ratio
//! tests with half-integer degrees of freedom, profile-likelihood intervals
//! for cell-mean contrasts, the scaling-adjusted F-test for two-way sensory
//! layouts, and limits of agreement for method-comparison studies.
//!
//! The numeric core is generic over the scalar type ([`num::Scalar`],
//! implemented for `f32` and `f64`); the aliases below fix `f64`, which is
//! what every documented tolerance refers to.

pub mod data;
pub mod design;
pub mod error;
pub mod formula;
pub mod likelihood;
pub mod linalg;
pub mod num;
pub mod optimize;
pub mod sim;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use formula::{parse_formula, ModelSpec};

/// `f64` dataset.
pub type Dataset = data::Dataset<f64>;
/// `f64` unconstrained parameter vector.
pub type ParamVector = design::ParamVector<f64>;
/// `f64` natural-scale parameters.
pub type NaturalParams = design::NaturalParams<f64>;
