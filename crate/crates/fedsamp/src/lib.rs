//! Federated-optimization simulator built around variance-optimal client
//! sampling.
//!
//! The library is organized in five layers:
//!
//! - [`sampling`]: pure sampling mathematics — optimal, approximate and
//!   uniform inclusion probabilities, independent selection, variance
//!   formulas, improvement factors, and a brute-force verification oracle.
//! - [`protocol`]: message-level round state machines for the exact and the
//!   sum-only (secure-aggregation-compatible) sampling protocols, plus a
//!   deterministic uplink bit ledger.
//! - [`tasks`]: synthetic federations (quadratic and logistic) with
//!   analytically known constants.
//! - [`optim`]: DSGD and FedAvg round drivers, gradient-noise contracts, and
//!   theorem-derived step-size caps.
//! - [`harness`]: experiment configuration, seeded deterministic runs, and
//!   CSV metrics emission.

pub mod error;
pub mod harness;
pub mod optim;
pub mod protocol;
pub mod sampling;
pub mod stream;
pub mod tasks;

pub use error::{Error, Result};
