//! Desk-scale speculative-decoding laboratory.
//!
//! Everything needed to train and exercise a feature-level draft model
//! against a small frozen target transformer, built from first principles:
//! a metered tensor core with reverse-mode autodiff, block-compressed
//! attention masks for multi-step unrolled training, streaming block-sparse
//! attention, an in-place loss backward, a decoupled target-engine service
//! with a binary wire protocol, chain/tree speculative decoding with lossless
//! verification, and the closed-form speedup model with its Monte Carlo
//! validator.
//!
//! Start with the `examples/` directory: each example is a runnable tour of
//! one capability. The `speclab` binary exposes the same pipeline as
//! subcommands.

pub mod analytics;
pub mod attention;
pub mod blockmask;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod engine;
pub mod error;
pub mod loss;
pub mod manifest;
pub mod meter;
pub mod model;
pub mod rng;
pub mod specdec;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
