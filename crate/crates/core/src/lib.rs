//! Fixed-point inversion of rectified-flow velocity fields on Gaussian mixtures.
//!
//! The crate pairs an exact mixture velocity field with a small learned
//! one, runs fixed-point and group inversion against either, and provides
//! the diagnostics used to study why the iteration oscillates: period and
//! cluster detection, exact roots, Jacobian spectral norms, and
//! cluster-mean averaging. A harness and CLI drive the toy experiments.

// `!(x > 0.0)` range checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exec;
pub mod field;
pub mod harness;
pub mod inversion;
pub mod mixture;
pub mod mlp;
pub mod postopt;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
pub use exec::Exec;
pub use field::{FnField, LinearField, MixtureField, VelocityField, ZeroField};
pub use mixture::{Component, GaussianMixture};
pub use mlp::MlpField;
