//! One-way text [CLS] navigation for zero-shot semantic segmentation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pnm;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;
pub mod visual;
pub mod zoomin;

pub use error::{Error, Result};
