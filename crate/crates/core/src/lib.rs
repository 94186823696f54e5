//! Core numerics for federated inverse-variance averaging (FIVA) on
//! synthetic multi-client segmentation tasks.
//!
//! The crate provides the building blocks of the simulation:
//!
//! - [`nn`]: flat-parameter models (a small conv encoder-decoder and an MLP
//!   for tests) with shared backbone, per-client segmentation heads, exact
//!   hand-written backprop, and the combined cross-entropy + soft-Dice loss.
//! - [`welford`]: online per-parameter mean/variance estimation over gradient
//!   or parameter streams, finalized into client variances (FIVA-G / FIVA-P).
//! - [`client`]: the local training round, T mini-batch SGD steps with
//!   variance tracking, producing a [`client::ClientUpdate`].
//! - [`server`]: FedAvg and inverse-variance aggregation with the
//!   forgetting-factor variance update, plus broadcast.
//! - [`inference`]: sampling from the global parameter distribution,
//!   aleatoric/epistemic decomposition, multi-head fusion with
//!   uncertainty-weighted background reweighting, and the MC-Dropout sampler.
//! - [`metrics`]: Dice, expected calibration error, reliability diagrams.
//! - [`synthdata`]: deterministic heterogeneous shape-world datasets with
//!   partial labels, skewed sample counts, and intensity shifts.
//!
//! All arithmetic is f64; every random draw is derived from explicit seeds so
//! a run is a pure function of its configuration.

pub mod client;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod param;
pub mod seeds;
pub mod server;
pub mod synthdata;
pub mod welford;

pub use error::{Error, Result};
pub use param::ParamVector;
