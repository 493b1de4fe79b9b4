//! End-to-end pipeline for extracting clinical problems (ICD9 / phecode
//! labels) from concatenated clinical notes with a convolutional per-problem
//! attention network, predicting an ICU outcome from the extracted problem
//! scores, and rendering interpretable dynamic problem lists.

pub mod cli;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod explain;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod train;

pub use error::{DynplError, Result};
