//! Traffic-accident risk forecasting on gridded cities.
//!
//! The model encodes sliding windows of per-region risk features with
//! efficient Kolmogorov-Arnold layers, selective state-space scans and graph
//! convolutions, and is trained jointly with two self-supervised objectives
//! built from heterogeneity-guided augmentations of the input.

pub mod augment;
pub mod bench;
pub mod config;
pub mod dataio;
pub mod ekan;
mod error;
pub mod graph;
pub mod metrics;
pub mod numerics;
pub mod sssm;
pub mod ssl;
pub mod train;

pub use error::{Error, Result};
