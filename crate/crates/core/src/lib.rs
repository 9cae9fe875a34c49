//! Self-supervised dense pre-training for event-camera data.
//!
//! The pipeline synthesizes event streams, converts them to voxel-grid event
//! images, builds affine-related augmented pairs, and trains a small ViT
//! student against an EMA teacher with patch-, context- and image-level
//! cross-entropy objectives. A frozen-feature linear probe measures transfer.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod context;
pub mod error;
pub mod event;
pub mod geometry;
pub mod model;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
