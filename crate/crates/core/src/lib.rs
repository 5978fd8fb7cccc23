//! Federated distantly-supervised relation extraction with cross-platform
//! multiple-instance denoising.
//!
//! Platforms hold disjoint shards of distantly-labelled sentences and train a
//! shared piecewise convolutional relation scorer by federated averaging.
//! Each round, the lazy MIL protocol picks one reliable sentence per
//! knowledge-base triple across all activated platforms using only
//! `(score, index, platform)` uploads; sentence text never leaves a platform.

pub mod baselines;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod numeric;
pub mod rng;

pub use error::{Error, Result};
