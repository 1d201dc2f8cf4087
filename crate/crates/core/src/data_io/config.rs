use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Per-dataset processing configuration.
///
/// Serialized with the same keys as the reference configuration dictionary
/// (`scale_factor`, `resolutions`, `organs`, `organ_names`, `inputsize`,
/// `flip_h`, `flip_v`, `rotate`, `transpose`) plus `seed`,
/// `min_landmarks` and `rotate_max_deg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub database_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<String>,
    pub scale_factor: f64,
    #[serde(default = "default_min_landmarks")]
    pub min_landmarks: usize,
    /// One identifier per resolution level, finest first.
    pub resolutions: Vec<String>,
    #[serde(rename = "organs", with = "label_strings")]
    pub organ_labels: Vec<u8>,
    pub organ_names: Vec<String>,
    #[serde(rename = "inputsize")]
    pub input_size: usize,
    #[serde(rename = "flip_h")]
    pub aug_flip_h: bool,
    #[serde(rename = "flip_v")]
    pub aug_flip_v: bool,
    #[serde(rename = "rotate")]
    pub aug_rotate: bool,
    #[serde(rename = "transpose")]
    pub aug_transpose: bool,
    #[serde(default = "default_rotate_max_deg")]
    pub rotate_max_deg: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_min_landmarks() -> usize {
    16
}

fn default_rotate_max_deg() -> f64 {
    10.0
}

const LEVEL_NAMES: [&str; 6] = ["Full", "Half", "Quarter", "Eighth", "Sixteenth", "ThirtySecond"];

pub(crate) fn level_names(levels: usize) -> Vec<String> {
    (0..levels)
        .map(|i| {
            LEVEL_NAMES
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("Level{}", i + 1))
        })
        .collect()
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            database_path: None,
            output_path: None,
            scale_factor: 0.10,
            min_landmarks: default_min_landmarks(),
            resolutions: level_names(3),
            organ_labels: vec![1],
            organ_names: vec!["Organ 1".into()],
            input_size: 64,
            aug_flip_h: false,
            aug_flip_v: false,
            aug_rotate: false,
            aug_transpose: false,
            rotate_max_deg: default_rotate_max_deg(),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn resolution_levels(&self) -> usize {
        self.resolutions.len()
    }

    pub fn set_resolution_levels(&mut self, levels: usize) {
        self.resolutions = level_names(levels);
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.scale_factor > 0.0 && self.scale_factor <= 1.0) {
            return fail(format!("scale_factor {} not in (0, 1]", self.scale_factor));
        }
        if self.min_landmarks < 3 {
            return fail(format!("min_landmarks {} < 3", self.min_landmarks));
        }
        if self.resolutions.is_empty() {
            return fail("at least one resolution level required".into());
        }
        if self.organ_labels.is_empty() {
            return fail("no organs configured".into());
        }
        let mut sorted = self.organ_labels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.organ_labels.len() || sorted[0] == 0 {
            return fail(format!(
                "organ labels must be distinct and nonzero: {:?}",
                self.organ_labels
            ));
        }
        if self.organ_names.len() != self.organ_labels.len() {
            return fail("organ_names and organs differ in length".into());
        }
        if self.input_size == 0 || self.input_size % 2 != 0 {
            return fail(format!("inputsize {} must be positive and even", self.input_size));
        }
        if !(self.rotate_max_deg >= 0.0) {
            return fail("rotate_max_deg must be >= 0".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Organ ids are written as strings; integers are accepted on input.
mod label_strings {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Label {
        Str(String),
        Int(u8),
    }

    pub fn serialize<S: Serializer>(labels: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(labels.iter().map(|l| l.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let raw = Vec::<Label>::deserialize(d)?;
        raw.into_iter()
            .map(|l| match l {
                Label::Int(v) => Ok(v),
                Label::Str(s) => s
                    .trim()
                    .parse::<u8>()
                    .map_err(|_| serde::de::Error::custom(format!("bad organ id {s:?}"))),
            })
            .collect()
    }
}
