//! Segmentation and correspondence metrics.
//!
//! Overlap and surface distances are computed in pixels. Correspondence
//! consistency needs the exact boundary of each shape (available for
//! synthetic data) and measures how stable each landmark's position along
//! that boundary is across a population.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data_io::ShapeOracle;
use crate::error::{Error, Result};
use crate::geometry::dist;
use crate::grid::{BinaryMask, Point};
use crate::losses::gather_organs;
use crate::rasterizer::hard_rasterize;
use crate::topology::Level;

/// `2|a ∩ b| / (|a| + |b|)`, 1 when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "dice of {}x{} and {}x{} masks",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Foreground pixels with a 4-neighbour that is background or outside the
/// grid, as pixel centres.
pub fn boundary_pixels(mask: &BinaryMask) -> Vec<Point> {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !*mask.get(x as usize, y as usize) {
                continue;
            }
            let edge = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|(dx, dy)| !mask.get_signed(x + dx, y + dy).copied().unwrap_or(false));
            if edge {
                out.push([x as f64 + 0.5, y as f64 + 0.5]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDistances {
    pub hausdorff: f64,
    pub assd: f64,
    /// Set when either mask is empty; both distances are then infinite.
    pub empty: bool,
}

fn directed(from: &[Point], to: &[Point]) -> (f64, f64) {
    let mut max: f64 = 0.0;
    let mut sum = 0.0;
    for &p in from {
        let d = to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min);
        max = max.max(d);
        sum += d;
    }
    (max, sum / from.len() as f64)
}

/// Exact Hausdorff distance and average symmetric surface distance between
/// the boundary pixel sets of two masks.
pub fn boundary_distances(a: &BinaryMask, b: &BinaryMask) -> Result<BoundaryDistances> {
    if !a.same_shape(b) {
        return Err(Error::Shape("boundary distances of differently sized masks".into()));
    }
    let (ba, bb) = (boundary_pixels(a), boundary_pixels(b));
    if ba.is_empty() || bb.is_empty() {
        return Ok(BoundaryDistances {
            hausdorff: f64::INFINITY,
            assd: f64::INFINITY,
            empty: true,
        });
    }
    let (max_ab, mean_ab) = directed(&ba, &bb);
    let (max_ba, mean_ba) = directed(&bb, &ba);
    Ok(BoundaryDistances {
        hausdorff: max_ab.max(max_ba),
        assd: 0.5 * (mean_ab + mean_ba),
        empty: false,
    })
}

/// Hard raster of each organ's closed contour. `nodes` are in pixels.
pub fn graph_masks(nodes: &[Point], level: &Level, width: usize, height: usize) -> Vec<BinaryMask> {
    gather_organs(nodes, level)
        .iter()
        .map(|poly| hard_rasterize(poly, width, height))
        .collect()
}

/// Per-index circular statistics of the boundary parameter, in parameter
/// units (fractions of the contour length).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Population mean of the per-index standard deviations.
    pub summary: f64,
}

fn wrap(a: f64) -> f64 {
    let r = (a + 0.5 * TAU).rem_euclid(TAU) - 0.5 * TAU;
    if r >= 0.5 * TAU {
        r - TAU
    } else {
        r
    }
}

fn circular_mean(angles: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = angles.fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    s.atan2(c)
}

/// Dispersion of each landmark's position along the true boundary across
/// samples.
///
/// `t[i][n]` is the arc-length parameter of the true curve point closest to
/// landmark `i` of sample `n`. Each sample is first rotated by the circular
/// mean of its offsets to sample 0. The per-index std is the root mean
/// square of the wrapped deviation from the circular mean, so uniformly
/// scattered landmarks give `1/sqrt(12)`.
pub fn correspondence_consistency(predictions: &[Vec<Point>], oracles: &[&ShapeOracle]) -> Result<Correspondence> {
    if predictions.is_empty() || predictions.len() != oracles.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} oracles",
            predictions.len(),
            oracles.len()
        )));
    }
    let m = predictions[0].len();
    if m == 0 || predictions.iter().any(|p| p.len() != m) {
        return Err(Error::InvalidInput("predictions must share a nonzero landmark count".into()));
    }
    let mut theta: Vec<Vec<f64>> = predictions
        .iter()
        .zip(oracles)
        .map(|(pts, o)| pts.iter().map(|&p| TAU * o.project(p)).collect())
        .collect();
    let reference = theta[0].clone();
    for row in theta.iter_mut().skip(1) {
        let shift = circular_mean(row.iter().zip(&reference).map(|(a, r)| a - r));
        for a in row.iter_mut() {
            *a -= shift;
        }
    }
    let mut mean = Vec::with_capacity(m);
    let mut std = Vec::with_capacity(m);
    for i in 0..m {
        let mu = circular_mean(theta.iter().map(|r| r[i]));
        let var = theta.iter().map(|r| wrap(r[i] - mu).powi(2)).sum::<f64>() / theta.len() as f64;
        mean.push(mu.rem_euclid(TAU) / TAU);
        std.push(var.sqrt() / TAU);
    }
    let summary = std.iter().sum::<f64>() / m as f64;
    Ok(Correspondence { mean, std, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganScore {
    pub subject_id: String,
    pub organ: u8,
    pub dice: f64,
    pub hausdorff_px: f64,
    pub assd_px: f64,
    pub empty: bool,
}

pub fn score_organ(subject_id: &str, organ: u8, predicted: &BinaryMask, truth: &BinaryMask) -> Result<OrganScore> {
    let d = boundary_distances(predicted, truth)?;
    Ok(OrganScore {
        subject_id: subject_id.to_string(),
        organ,
        dice: dice(predicted, truth)?,
        hausdorff_px: d.hausdorff,
        assd_px: d.assd,
        empty: d.empty,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSummary {
    pub organ: u8,
    pub count: usize,
    pub mean_dice: f64,
    pub median_dice: f64,
    pub mean_hausdorff_px: f64,
    pub mean_assd_px: f64,
    pub median_assd_px: f64,
    pub correspondence: Option<f64>,
}

/// Per-sample scores plus optional per-organ correspondence statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scores: Vec<OrganScore>,
    pub correspondence: Vec<(u8, Correspondence)>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl MetricsReport {
    pub fn organs(&self) -> Vec<u8> {
        let mut o: Vec<u8> = self.scores.iter().map(|s| s.organ).collect();
        o.sort_unstable();
        o.dedup();
        o
    }

    pub fn correspondence_of(&self, organ: u8) -> Option<&Correspondence> {
        self.correspondence.iter().find(|(o, _)| *o == organ).map(|(_, c)| c)
    }

    pub fn summary(&self) -> Vec<OrganSummary> {
        self.organs()
            .into_iter()
            .map(|organ| {
                let rows: Vec<&OrganScore> = self.scores.iter().filter(|s| s.organ == organ).collect();
                let pick = |f: fn(&OrganScore) -> f64| rows.iter().map(|s| f(s)).collect::<Vec<_>>();
                let dice = pick(|s| s.dice);
                let hd = pick(|s| s.hausdorff_px);
                let assd = pick(|s| s.assd_px);
                OrganSummary {
                    organ,
                    count: rows.len(),
                    mean_dice: mean(&dice),
                    median_dice: median(&dice),
                    mean_hausdorff_px: mean(&hd),
                    mean_assd_px: mean(&assd),
                    median_assd_px: median(&assd),
                    correspondence: self.correspondence_of(organ).map(|c| c.summary),
                }
            })
            .collect()
    }

    /// One row per sample and organ; the correspondence column repeats the
    /// organ's population summary.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("subject_id,organ,dice,hausdorff_px,assd_px,correspondence\n");
        for r in &self.scores {
            let c = self
                .correspondence_of(r.organ)
                .map(|c| c.summary.to_string())
                .unwrap_or_default();
            writeln!(s, "{},{},{},{},{},{}", r.subject_id, r.organ, r.dice, r.hausdorff_px, r.assd_px, c).unwrap();
        }
        s
    }

    pub fn correspondence_csv(&self) -> String {
        let mut s = String::from("organ,index,circular_mean,circular_std\n");
        for (organ, c) in &self.correspondence {
            for (i, (m, d)) in c.mean.iter().zip(&c.std).enumerate() {
                writeln!(s, "{organ},{i},{m},{d}").unwrap();
            }
        }
        s
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())?)
    }
}
