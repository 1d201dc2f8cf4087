use crate::contours::extract_organ_contours;
use crate::data_io::Sample;
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Image, Point};
use crate::losses::{
    cap_points, chamfer_loss, edge_regularizers, gather_organs, pixel_loss, scatter_organs, total_loss, ChamferTerm,
    EdgeGradient, KlTerm, LossBundle, LossParts, LossWeights, PixelTerm,
};
use crate::rasterizer::soft_rasterize;
use crate::topology::{EdgeTensor, Level};

/// Supervision targets for one image, indexed by organ position.
#[derive(Debug, Clone)]
pub struct Targets {
    pub subject_id: String,
    /// Image side used for normalization (the longer side).
    pub side: usize,
    pub width: usize,
    pub height: usize,
    /// Contour pixel centres, normalized.
    pub points: Vec<Vec<Point>>,
    pub masks: Vec<BinaryMask>,
    pub annotated: Vec<bool>,
}

impl Targets {
    /// Contours and binary masks of each organ in `organs`. Organs missing
    /// from the mask or from the sample's annotation list are unannotated.
    pub fn from_sample(sample: &Sample, organs: &[u8], max_points: usize) -> Self {
        let mask = &sample.mask;
        let side = mask.width().max(mask.height());
        let contours = extract_organ_contours(mask, organs);
        let mut points = Vec::with_capacity(organs.len());
        let mut annotated = Vec::with_capacity(organs.len());
        for organ in organs {
            match contours.get(organ) {
                Some(c) if sample.is_annotated(*organ) => {
                    let pts: Vec<Point> = c.centers().iter().map(|p| [p[0] / side as f64, p[1] / side as f64]).collect();
                    points.push(cap_points(&pts, max_points));
                    annotated.push(true);
                }
                _ => {
                    points.push(vec![]);
                    annotated.push(false);
                }
            }
        }
        Self {
            subject_id: sample.subject_id.clone(),
            side,
            width: mask.width(),
            height: mask.height(),
            points,
            masks: organs.iter().map(|&o| mask.binarize(o)).collect(),
            annotated,
        }
    }

    pub fn any_annotated(&self) -> bool {
        self.annotated.iter().any(|a| *a)
    }
}

/// Knobs shared by direct fitting and training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    pub sigma: f64,
    pub use_raster: bool,
    pub edge_gradient: EdgeGradient,
}

/// Finest-level loss on node coordinates (Chamfer, rasterized pixel loss
/// and edge terms) plus optional KL, with the full gradient on nodes
/// including the path through the rasterizer.
pub struct GraphLoss {
    pub bundle: LossBundle,
    pub d_nodes: Vec<Point>,
    pub soft_masks: Vec<Image>,
}

pub fn graph_loss(
    nodes: &[Point],
    level: &Level,
    edges: &EdgeTensor,
    targets: &Targets,
    weights: &LossWeights,
    opts: &ObjectiveOptions,
    kl: Option<&KlTerm>,
) -> Result<GraphLoss> {
    if nodes.len() != level.num_nodes {
        return Err(Error::Shape(format!("{} nodes for a level of {}", nodes.len(), level.num_nodes)));
    }
    let organ_pts = gather_organs(nodes, level);
    let chamfer = chamfer_loss(&organ_pts, &targets.points, &targets.annotated)?;
    let edge = edge_regularizers(nodes, edges, opts.edge_gradient);
    let side = targets.side as f64;
    let mut soft_masks = Vec::new();
    let mut rasters = Vec::new();
    let pixel = if opts.use_raster && targets.any_annotated() {
        for (o, pts) in organ_pts.iter().enumerate() {
            if targets.annotated[o] {
                let px: Vec<Point> = pts.iter().map(|p| [p[0] * side, p[1] * side]).collect();
                let r = soft_rasterize(&px, targets.width, targets.height, opts.sigma);
                soft_masks.push(r.mask.values.clone());
                rasters.push(Some((r, px)));
            } else {
                soft_masks.push(Image::new(targets.width, targets.height));
                rasters.push(None);
            }
        }
        Some(pixel_loss(&soft_masks, &targets.masks, &targets.annotated)?)
    } else {
        None
    };
    let parts = LossParts {
        chamfer: &chamfer,
        pixel: pixel.as_ref(),
        kl,
        edge: &edge,
        level,
    };
    let bundle = total_loss(&parts, weights);
    let mut d_nodes = bundle.d_points.clone();
    if pixel.is_some() {
        let per_organ: Vec<Vec<Point>> = rasters
            .iter()
            .zip(&bundle.d_masks)
            .zip(&organ_pts)
            .map(|((r, dm), pts)| match r {
                Some((raster, px)) => raster
                    .backward(px, dm)
                    .into_iter()
                    .map(|g| [g[0] * side, g[1] * side])
                    .collect(),
                None => vec![[0.0; 2]; pts.len()],
            })
            .collect();
        for (d, g) in d_nodes.iter_mut().zip(scatter_organs(&per_organ, level)) {
            d[0] += g[0];
            d[1] += g[1];
        }
    }
    Ok(GraphLoss {
        bundle,
        d_nodes,
        soft_masks,
    })
}

/// Chamfer-only loss at a coarser level, scaled by `weight`.
pub fn level_chamfer(nodes: &[Point], level: &Level, targets: &Targets, weight: f64) -> Result<(f64, Vec<Point>)> {
    let ChamferTerm { value, grad } = chamfer_loss(&gather_organs(nodes, level), &targets.points, &targets.annotated)?;
    let mut d = scatter_organs(&grad, level);
    for g in &mut d {
        g[0] *= weight;
        g[1] *= weight;
    }
    Ok((value, d))
}

/// Dice + BCE of the auxiliary dense masks.
pub fn aux_pixel_loss(masks: &[Image], targets: &Targets) -> Result<PixelTerm> {
    pixel_loss(masks, &targets.masks, &targets.annotated)
}
