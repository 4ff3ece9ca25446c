//! Synthetic attribute-binding benchmark, fusion heads over frozen features,
//! contrastive training and retrieval metrics.

pub mod backbone;
pub mod benchgen;
pub mod error;
pub mod experiment;
pub mod features;
pub mod fusion;
pub mod metrics;
pub mod pools;
pub mod scene;
pub mod split;
pub mod training;
pub mod util;
pub mod vocab;

pub use error::{CoreError, Result};
