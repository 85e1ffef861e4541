//! Attribute unlearning for user-level federated recommendation.
//!
//! A federated MF/NCF-style recommender is trained together with an
//! adversarial attribute head placed behind a gradient reversal layer. A
//! per-user trigger gates the reversed gradient, and an optional
//! dual-stochastic final layer masks the label signal carried by the
//! head's gradients. The [`attacks`] module implements the attribute
//! inference and gradient-inversion attacks used to measure leakage.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adversary;
pub mod attacks;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fedsim;
pub mod numkernel;
pub mod recmodel;

pub use error::{Error, Result};
pub use numkernel::{DenseMatrix, RngStream};
