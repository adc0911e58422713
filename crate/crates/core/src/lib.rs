//! Masked spatiotemporal pretraining and finetuning for 3D skeleton motion
//! prediction.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod training;

pub use error::{Error, Result};
