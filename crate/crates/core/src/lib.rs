//! Occlusion-aware facial expression recognition.
//!
//! The pipeline detects occluded patches with a one-class hypersphere model
//! over transformer latents, reconstructs them with a hybrid
//! transformer/U-Net network whose bottleneck runs a symmetry-guided
//! self-assembly step, and classifies the seven basic expressions by fusing
//! convolutional features with attention-selected latent vectors.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod ferhead;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod patchgrid;
pub mod pipeline;
pub mod plot;
pub mod reconstruct;
pub mod report;
pub mod svdd;
pub mod toydata;
pub mod util;

pub use error::{Error, ErrorClass, Result};
