//! Mask and config I/O, geometric preprocessing, subject-wise splitting and
//! synthetic shape populations.

mod augment;
mod config;
mod manifest;
mod pgm;
mod resize;
mod split;
pub mod synth;

pub use augment::{augment, flip_h, flip_v, rotate, transpose};
pub use config::DatasetConfig;
pub use manifest::{load_manifest, load_samples, save_manifest, ManifestEntry};
pub use pgm::{
    image_from_gray, image_to_gray, load_image, load_mask, parse_pgm, save_image, save_mask,
    write_pgm,
};
pub use resize::{pad_and_resize, pad_to_square};
pub use split::{split_subjects, Split};
pub use synth::{gen_synthetic_population, ShapeOracle, SyntheticShapeParams, SyntheticSpec};

use crate::grid::{Image, LabelMask};
use serde::{Deserialize, Serialize};

/// One image with its label mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Image,
    pub mask: LabelMask,
    pub subject_id: String,
    /// Labels covered by this sample's annotation protocol. May be a strict
    /// subset of the configured organs.
    pub annotated_organs: Vec<u8>,
}

impl Sample {
    pub fn new(image: Image, mask: LabelMask, subject_id: impl Into<String>) -> Self {
        let annotated_organs = mask.labels();
        Self {
            image,
            mask,
            subject_id: subject_id.into(),
            annotated_organs,
        }
    }

    pub fn is_annotated(&self, label: u8) -> bool {
        self.annotated_organs.contains(&label)
    }
}
