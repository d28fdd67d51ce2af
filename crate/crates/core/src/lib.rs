//! Graph-free spatio-temporal traffic forecasting.
//!
//! Each sensor is handled on its own: a per-step MLP over its ego-graph
//! history (the sensor plus its strongest one-hop neighbors), a learned
//! sensor embedding for global correlations, and a pluggable temporal
//! encoder feeding a small predictor. The crate is `no_std` with `alloc`;
//! file formats, timing and the command line live in the `simst` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod analysis;
pub mod baseline;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{ActivationKind, Tape, Var};
pub use tensor::Tensor;
