//! Mask-to-graph network: convolutional encoder, variational bottleneck and
//! a hierarchical Chebyshev graph decoder with image-to-graph skip
//! connections (IGSC). The Dual variant adds a U-Net style auxiliary
//! decoder whose feature maps feed the IGSC sampling instead of the encoder
//! maps.
//!
//! Coordinates produced by the model are normalized to `[0, 1]^2`.

pub mod layers;
mod network;
pub mod params;

use serde::{Deserialize, Serialize};

pub use network::{Forward, Model, Upstream};
pub use params::{ParamBlock, Params};

use crate::grid::{Image, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Standard,
    Dual,
}

/// What the encoder sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    #[default]
    Image,
    /// The label mask itself, as a shape auto-encoder.
    Mask,
}

/// Initial per-node readout bias.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadoutInit {
    /// Every node starts at `(c, c)`.
    Constant(f64),
    /// Each organ starts on a clockwise circle, node 0 at the top.
    #[default]
    Circle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub encoder_widths: Vec<usize>,
    pub latent_dim: usize,
    pub cheb_order: usize,
    pub graph_width: usize,
    pub cheb_layers: usize,
    pub variant: Variant,
    pub input_mode: InputMode,
    pub readout_init: ReadoutInit,
    /// Circle radius for [`ReadoutInit::Circle`], normalized units.
    pub template_radius: f64,
    /// Image-conditioned residual on the finest coordinates.
    pub refine: bool,
    pub log_var_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            encoder_widths: vec![8, 16, 32, 64],
            latent_dim: 32,
            cheb_order: 6,
            graph_width: 32,
            cheb_layers: 2,
            variant: Variant::Standard,
            input_mode: InputMode::Image,
            readout_init: ReadoutInit::Circle,
            template_radius: 0.25,
            refine: true,
            log_var_bias: 0.0,
        }
    }
}

/// Encodes a label mask as a one-channel input image (`label / max`).
pub fn mask_to_input(mask: &LabelMask) -> Image {
    let max = mask.data().iter().copied().max().unwrap_or(0).max(1) as f64;
    mask.map(|&l| l as f64 / max)
}

pub use network::reparameterize;
