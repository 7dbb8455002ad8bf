//! Deterministic building blocks for personalized federated learning with
//! amortized variational inference.
//!
//! The crate is organised around a handful of small modules:
//!
//! - [`varinf`]: mean-field Gaussian posteriors, KL terms and their gradients,
//!   the reparameterization chain rule, and server-side aggregation.
//! - [`bnn`]: a tiny MLP zoo over flat weight vectors, likelihood heads, exact
//!   backpropagation, and the per-client variational objective.
//! - [`fedcore`]: the federated training loop (client update, server round,
//!   resumable multi-round training) plus the point-estimate baseline modes.
//! - [`tasks`]: synthetic data generators, label-skew partitioning, and
//!   distribution-shift transforms.
//! - [`metrics`]: predictive entropy, squared Hellinger distance, and
//!   per-client evaluation reports.
//!
//! Everything here is `no_std`-compatible (with `alloc`); file formats and the
//! command line front end live in the companion `fedabml-cli` crate.
//!
//! Every random draw is taken from a generator derived through [`rng::stream`]
//! as a pure function of `(seed, purpose, round, unit)`, which is what makes
//! training histories reproducible bit for bit and independent of client
//! execution order.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod bnn;
pub mod error;
pub mod fedcore;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod tasks;
pub mod varinf;

pub use error::{Error, Result};
