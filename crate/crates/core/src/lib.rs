//! Graph-based boundary segmentation trained from pixel-level masks.
//!
//! Organs are represented as fixed-size closed boundary graphs. Models are
//! supervised with Chamfer distance against variable-length mask contours,
//! a differentiable polygon rasterizer, and active-contour style edge
//! regularizers, so no point-to-point correspondences are needed for
//! training.
//!
//! The crate is organised bottom-up:
//!
//! - [`grid`]: dense 2D grids used for images and masks
//! - [`data_io`]: PGM masks, configs, resizing, augmentation, splits and the
//!   synthetic shape populations
//! - [`contours`]: boundary tracing and contour statistics
//! - [`topology`]: landmark counts, adjacency, pooling matrices, unified
//!   graphs and edge tensors
//! - [`rasterizer`]: soft and hard polygon rasterization
//! - [`losses`]: every training loss with analytic gradients
//! - [`model`]: encoder, variational bottleneck and Chebyshev graph decoder
//! - [`engine`]: schedules, Adam, snake fitting, training and checkpoints
//! - [`metrics`]: Dice, Hausdorff, ASSD and correspondence consistency

pub mod contours;
pub mod data_io;
pub mod engine;
mod error;
pub mod geometry;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rasterizer;
pub mod topology;

pub use error::{Error, Result};
pub use grid::{BinaryMask, Grid, Image, LabelMask, Point};
