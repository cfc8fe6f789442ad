//! Polarimetric SAR land-cover classification with superpixel-aware
//! contrastive pretraining.
//!
//! The pipeline runs speckle filtering, target decompositions into a feature
//! cube, SLIC superpixels, beam-search feature-group filtering, contrastive
//! pretraining of a patch network against a feature-vector network, few-shot
//! fine-tuning and confusion-matrix evaluation.

pub mod config;
pub mod contrastive;
pub mod decomposition;
pub mod error;
pub mod filter;
pub mod io;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod polsar;
pub mod sampling;
pub mod superpixel;
pub mod train;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
