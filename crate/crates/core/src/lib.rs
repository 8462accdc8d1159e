//! Federated classifier anchoring simulator.
//!
//! Each client trains a shared feature extractor and federated classifier
//! head alongside a private personalized head. Both heads are calibrated
//! with the client's class prior, and a KL consistency term lets the
//! (detached) personalized head guide the federated one. The server
//! aggregates client deltas weighted by training-set size.

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod partition;

#[cfg(any(test, feature = "testing"))]
pub mod testing;

pub use error::{Error, Result};
