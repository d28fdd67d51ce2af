//! File formats, benchmarks, synthetic data and the command line around
//! `simst-core`.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod store;
pub mod synth;
