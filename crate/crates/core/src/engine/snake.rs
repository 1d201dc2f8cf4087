use log::warn;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, VecAdam};
use super::objective::{graph_loss, ObjectiveOptions, Targets};
use super::schedule::ScheduleConfig;
use crate::data_io::Sample;
use crate::error::{Error, Result};
use crate::grid::{LabelMask, Point};
use crate::losses::{EdgeGradient, MAX_TRUTH_POINTS};
use crate::rasterizer::DEFAULT_SIGMA;
use crate::topology::GraphTopology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnakeConfig {
    pub iterations: usize,
    /// Adam step size in normalized coordinates.
    pub learning_rate: f64,
    pub sigma: f64,
    pub use_raster: bool,
    pub edge_gradient: EdgeGradient,
    pub schedule: ScheduleConfig,
}

impl Default for SnakeConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            learning_rate: 1e-3,
            sigma: DEFAULT_SIGMA,
            use_raster: true,
            edge_gradient: EdgeGradient::StopGradient,
            schedule: ScheduleConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SnakeFit {
    /// Finest-level node coordinates, normalized.
    pub points: Vec<Point>,
    /// Total loss before each step.
    pub losses: Vec<f64>,
}

/// Clockwise circle per organ at its mask centroid with radius
/// `sqrt(area / pi)`, node 0 at the top. Shared nodes average their
/// organs' positions. Absent organs collapse to the image centre.
pub fn circle_init(mask: &LabelMask, topology: &GraphTopology) -> Vec<Point> {
    let level = topology.finest();
    let side = mask.width().max(mask.height()) as f64;
    let mut sums = vec![([0.0, 0.0], 0usize); level.num_nodes];
    for (o, cyc) in level.organ_cycles.iter().enumerate() {
        let organ = topology.organs[o];
        let bin = mask.binarize(organ);
        let (center, radius) = if bin.count() == 0 {
            warn!("organ {organ} absent from the target mask; landmarks start at the image centre");
            ([0.5 * mask.width() as f64, 0.5 * mask.height() as f64], 0.0)
        } else {
            let (mut sx, mut sy) = (0.0, 0.0);
            for y in 0..bin.height() {
                for x in 0..bin.width() {
                    if *bin.get(x, y) {
                        sx += x as f64 + 0.5;
                        sy += y as f64 + 0.5;
                    }
                }
            }
            let n = bin.count() as f64;
            ([sx / n, sy / n], (n / std::f64::consts::PI).sqrt())
        };
        let n = cyc.len() as f64;
        for (k, &v) in cyc.iter().enumerate() {
            let t = -std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * k as f64 / n;
            let s = &mut sums[v];
            s.0[0] += (center[0] + radius * t.cos()) / side;
            s.0[1] += (center[1] + radius * t.sin()) / side;
            s.1 += 1;
        }
    }
    sums.iter().map(|(p, c)| [p[0] / *c as f64, p[1] / *c as f64]).collect()
}

/// Fits the finest-level graph directly to one mask by Adam on the node
/// coordinates, minimizing Chamfer, pixel and edge terms (no KL).
pub fn snake_fit(mask: &LabelMask, topology: &GraphTopology, cfg: &SnakeConfig) -> Result<SnakeFit> {
    snake_fit_from(mask, topology, cfg, circle_init(mask, topology))
}

/// [`snake_fit`] from explicit starting coordinates.
pub fn snake_fit_from(mask: &LabelMask, topology: &GraphTopology, cfg: &SnakeConfig, init: Vec<Point>) -> Result<SnakeFit> {
    if !topology.organs.iter().any(|o| mask.labels().contains(o)) {
        return Err(Error::InvalidInput("target mask contains none of the configured organs".into()));
    }
    let sample = Sample::new(mask.map(|_| 0.0), mask.clone(), "snake");
    let targets = Targets::from_sample(&sample, &topology.organs, MAX_TRUTH_POINTS);
    let level = topology.finest();
    let edges = topology.edge_tensor(0);
    let opts = ObjectiveOptions {
        sigma: cfg.sigma,
        use_raster: cfg.use_raster,
        edge_gradient: cfg.edge_gradient,
    };
    let mut x: Vec<f64> = init.iter().flat_map(|p| [p[0], p[1]]).collect();
    let mut adam = VecAdam::new(
        x.len(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut losses = Vec::with_capacity(cfg.iterations);
    let total = cfg.iterations.max(1);
    for it in 0..cfg.iterations {
        let weights = cfg.schedule.weights_at(it, total)?.weights;
        let nodes: Vec<Point> = x.chunks(2).map(|c| [c[0], c[1]]).collect();
        let loss = graph_loss(&nodes, level, &edges, &targets, &weights, &opts, None)?;
        if !loss.bundle.is_finite() {
            return Err(Error::NonFinite(format!("snake loss at iteration {it}")));
        }
        losses.push(loss.bundle.total);
        let g: Vec<f64> = loss.d_nodes.iter().flat_map(|p| [p[0], p[1]]).collect();
        adam.step(&mut x, &g);
    }
    Ok(SnakeFit {
        points: x.chunks(2).map(|c| [c[0], c[1]]).collect(),
        losses,
    })
}
