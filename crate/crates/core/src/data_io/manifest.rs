use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_image, load_mask, Sample};
use crate::error::{Error, Result};

/// One manifest row. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub image_path: String,
    pub mask_path: String,
    pub annotated_organs: Vec<u8>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(entries)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every sample listed in a manifest.
pub fn load_samples(manifest: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    load_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let image = load_image(resolve(base, &e.image_path))?;
            let mask = load_mask(resolve(base, &e.mask_path))?;
            if !image.same_shape(&mask) {
                return Err(Error::Shape(format!(
                    "{}: image {}x{} vs mask {}x{}",
                    e.subject_id,
                    image.width(),
                    image.height(),
                    mask.width(),
                    mask.height()
                )));
            }
            Ok(Sample {
                image,
                mask,
                subject_id: e.subject_id,
                annotated_organs: e.annotated_organs,
            })
        })
        .collect()
}
