//! Weakly-supervised semantic segmentation by iteratively mining common
//! object features.
//!
//! Starting from image-level labels and per-class heatmaps, the pipeline
//! seeds superpixels, trains a region classifier on the seeds, supplements
//! single-class images with saliency through a Bayesian posterior and a CRF,
//! trains a pixel classifier on the result, and feeds its masks back in as
//! new seeds.

pub mod color;
pub mod crf;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod pixel;
pub mod raster;
pub mod region;
pub mod saliency;
pub mod seeding;
pub mod superpixel;
pub mod synth;

pub use error::{Error, Result};
