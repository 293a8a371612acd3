//! Tri-modal glaucoma staging: hierarchical encoders with cross-modal graph
//! attention, masked-autoencoder pretraining and supervised fine-tuning.

pub mod classifier;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod mae;
pub mod mcga;
pub mod metrics;
pub mod nn;
pub mod train;

pub use error::{HammError, Result};
