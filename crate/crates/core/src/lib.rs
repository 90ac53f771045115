//! Partially identifiable latent-variable model for multi-source domain
//! adaptation: a VAE whose changing latent components are transported by
//! per-domain monotonic spline flows, a synthetic ground-truth generator,
//! and identifiability metrics.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flows;
pub mod genproc;
pub mod imsda;
pub mod metrics;
pub mod ndgrad;
pub mod nets;
pub mod par;
pub mod rng;
pub mod study;

pub use error::{Error, Result};
