//! Adapter-based fine-tuning of a frozen vision-language segmentation model,
//! built on a small reverse-mode autodiff engine.

pub mod adapters;
pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod data;
mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod run;
pub mod train;

pub use error::{Error, Result};
