//! Max-fusion multi-encoder U-Net for multi-modal pathology segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape and finite-difference checks.
//! * [`nn`]: parameter storage, residual / dilated / side-convolution blocks and
//!   the spatial attention block.
//! * [`model`]: three modality encoders, per-level max fusion, bottleneck,
//!   decoder and the anatomy / pathology heads.
//! * [`loss`] and [`metrics`]: tversky + focal objectives and Dice scores.
//! * [`data`]: slice records, the on-disk dataset format, phantom generation
//!   and the dynamic patch resampler.
//! * [`train`]: optimizer, rotating cross-validation schedule and checkpoints.
//! * [`verify`]: finite-difference suites over the primitives and the model.

pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
