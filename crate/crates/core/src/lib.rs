//! Counterfactual subset-selection attribution and attribution-guided
//! background-refilling augmentation for training classifiers that do not
//! lean on a single shortcut cue.
//!
//! The crate is organised bottom-up: [`imaging`] holds rasters, region grids
//! and masking; [`scorer`] defines the black-box classifier interface;
//! [`tinynet`] is a small trainable convolutional classifier; [`attribution`]
//! implements the greedy attribution searches; [`augment`] turns searches
//! into refilled training samples; [`testbed`] generates a synthetic
//! shortcut benchmark; [`pipeline`] runs training and evaluation.

pub mod attribution;
pub mod augment;
pub mod cli;
pub mod error;
pub mod imaging;
pub mod pipeline;
pub mod scorer;
pub mod testbed;
pub mod tinynet;

pub use error::{Error, Result};

/// Version string embedded in every written artifact.
pub const TOOL_VERSION: &str = concat!("ssca ", env!("CARGO_PKG_VERSION"));
