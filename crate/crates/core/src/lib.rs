//! Semi-supervised phenotype classification for multi-channel plate-screen
//! images.
//!
//! The crate covers the whole pipeline: plate-aware normalization of raw
//! images, a micro depthwise-separable backbone trained as a mean-teacher
//! pair, angular-margin classification, two-model ensembling with
//! pseudo-labels, and per-plate balanced assignment of predictions.

pub mod assignment;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod ladder;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod plate_data;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
