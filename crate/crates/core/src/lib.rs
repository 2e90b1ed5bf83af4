//! Deterministic simulator for client-centric federated adaptive optimization.
//!
//! Clients run a random number of local SGD steps from a stale copy of the
//! global model and send normalized model differences. The server waits for
//! `m` of them and applies an SGD, momentum, Adagrad, Adam or AMSGrad step.

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod client;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod objectives;
pub mod rng;
pub mod server;
pub mod sim;
pub mod theory;

pub use error::{Error, Result};
