//! Simulator for progressive client onboarding in federated learning.
//!
//! A server-side hypernetwork generates each client's parameters, a learned
//! mask per onboarding batch isolates the subnetwork that batch uses, and
//! inputs inverted from batch-norm statistics replay old knowledge without
//! client data.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod federation;
pub mod hypernet;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod replay;
pub mod rng;

pub use error::{Error, Result};
