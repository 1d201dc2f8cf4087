use std::time::Instant;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::objective::{aux_pixel_loss, graph_loss, level_chamfer, ObjectiveOptions, Targets};
use super::schedule::{ScheduleConfig, ScheduleState};
use crate::data_io::Sample;
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::losses::{kl_loss, EdgeGradient, LossBundle, LossWeights, LOSS_CSV_HEADER, MAX_TRUTH_POINTS};
use crate::model::{mask_to_input, InputMode, Model, Params, Upstream, Variant};
use crate::rasterizer::DEFAULT_SIGMA;
use crate::topology::{EdgeTensor, GraphTopology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Fraction of the run trained with batch size 1.
    pub batch_ramp: f64,
    pub adam: AdamConfig,
    pub schedule: ScheduleConfig,
    pub sigma: f64,
    /// Pixel loss on the rasterized finest graph.
    pub use_raster: bool,
    /// Chamfer supervision at every level, not only the finest.
    pub multi_level_chamfer: bool,
    pub edge_gradient: EdgeGradient,
    pub seed: u64,
    /// Validation interval in iterations (0 disables periodic checks).
    pub val_every: usize,
    pub max_truth_points: usize,
    /// Sample the latent during training; otherwise use the posterior mean.
    pub sample_latent: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            batch_ramp: 0.1,
            adam: AdamConfig::default(),
            schedule: ScheduleConfig::default(),
            sigma: DEFAULT_SIGMA,
            use_raster: true,
            multi_level_chamfer: true,
            edge_gradient: EdgeGradient::StopGradient,
            seed: 0,
            val_every: 500,
            max_truth_points: MAX_TRUTH_POINTS,
            sample_latent: true,
        }
    }
}

/// Model input plus supervision for one sample.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub input: Image,
    pub targets: Targets,
}

pub fn prepare_items(samples: &[Sample], organs: &[u8], mode: InputMode, max_points: usize) -> Vec<TrainItem> {
    samples
        .iter()
        .map(|s| TrainItem {
            input: match mode {
                InputMode::Image => s.image.clone(),
                InputMode::Mask => mask_to_input(&s.mask),
            },
            targets: Targets::from_sample(s, organs, max_points),
        })
        .collect()
}

/// Parameters, optimizer moments and position in the run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Params,
    pub adam: AdamState,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(params: Params) -> Self {
        Self {
            adam: AdamState::new(&params),
            params,
            iteration: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogRow {
    pub iteration: usize,
    pub batch_size: usize,
    pub loss: LossBundle,
    /// Unweighted Chamfer per resolution level, finest first.
    pub level_chamfer: Vec<f64>,
    pub val_chamfer: Option<f64>,
    pub wall_time: f64,
}

pub const TRAIN_LOG_HEADER_SUFFIX: &str = "batch_size,val_chamfer,wall_time_s";

pub fn train_log_header() -> String {
    format!("{LOSS_CSV_HEADER},{TRAIN_LOG_HEADER_SUFFIX}")
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.3}",
            self.loss.csv_row(self.iteration),
            self.batch_size,
            self.val_chamfer.map(|v| v.to_string()).unwrap_or_default(),
            self.wall_time
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation Chamfer (final ones without
    /// validation data).
    pub best_params: Params,
    pub best_iteration: usize,
    pub best_val_chamfer: Option<f64>,
    pub state: TrainState,
    pub schedule: ScheduleState,
}

/// Population training driver bound to a model and its topology.
pub struct Trainer<'a> {
    pub model: &'a Model,
    pub topology: &'a GraphTopology,
    pub cfg: TrainConfig,
    edges: EdgeTensor,
}

fn mean_bundle(bundles: &[LossBundle]) -> LossBundle {
    let n = bundles.len() as f64;
    let mut m = bundles[0].clone();
    for b in &bundles[1..] {
        m.chamfer += b.chamfer;
        m.pixel += b.pixel;
        m.kld += b.kld;
        m.uniform += b.uniform;
        m.elastic += b.elastic;
        m.curvature += b.curvature;
        m.edge += b.edge;
        m.total += b.total;
    }
    for v in [
        &mut m.chamfer,
        &mut m.pixel,
        &mut m.kld,
        &mut m.uniform,
        &mut m.elastic,
        &mut m.curvature,
        &mut m.edge,
        &mut m.total,
    ] {
        *v /= n;
    }
    m
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Model, topology: &'a GraphTopology, cfg: TrainConfig) -> Result<Self> {
        if cfg.iterations == 0 || cfg.batch_size == 0 {
            return Err(Error::Config("iterations and batch_size must be positive".into()));
        }
        if model.nodes_per_level() != topology.levels.iter().map(|l| l.num_nodes).collect::<Vec<_>>() {
            return Err(Error::Config("model was built for a different topology".into()));
        }
        Ok(Self {
            edges: topology.edge_tensor(0),
            model,
            topology,
            cfg,
        })
    }

    fn options(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            sigma: self.cfg.sigma,
            use_raster: self.cfg.use_raster,
            edge_gradient: self.cfg.edge_gradient,
        }
    }

    pub fn batch_size_at(&self, iteration: usize) -> usize {
        if (iteration as f64) < self.cfg.batch_ramp * self.cfg.iterations as f64 {
            1
        } else {
            self.cfg.batch_size
        }
    }

    /// Per-iteration generator, so a resumed run draws the same batches.
    pub fn iteration_rng(&self, iteration: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(iteration as u64);
        rng
    }

    /// Loss and parameter gradient for one sample.
    pub fn sample_gradient(
        &self,
        params: &Params,
        item: &TrainItem,
        weights: &LossWeights,
        eps: Option<&[f64]>,
    ) -> Result<(LossBundle, Vec<f64>, Params)> {
        let fwd = self.model.forward(params, &item.input, eps)?;
        let kl = kl_loss(&fwd.mu, &fwd.log_var)?;
        let gl = graph_loss(
            &fwd.points[0],
            self.topology.finest(),
            &self.edges,
            &item.targets,
            weights,
            &self.options(),
            Some(&kl),
        )?;
        let mut bundle = gl.bundle;
        let mut levels = vec![bundle.chamfer];
        let mut d_points = vec![gl.d_nodes];
        for l in 1..self.topology.num_levels() {
            let level = &self.topology.levels[l];
            if self.cfg.multi_level_chamfer {
                let (v, d) = level_chamfer(&fwd.points[l], level, &item.targets, weights.chamfer)?;
                bundle.chamfer += v;
                bundle.total += weights.chamfer * v;
                levels.push(v);
                d_points.push(d);
            } else {
                d_points.push(vec![[0.0; 2]; level.num_nodes]);
            }
        }
        let mut d_aux = Vec::new();
        if self.model.config.variant == Variant::Dual {
            let term = aux_pixel_loss(&fwd.aux_masks, &item.targets)?;
            bundle.pixel += term.value;
            bundle.total += weights.pixel * term.value;
            d_aux = term.grad.iter().map(|g| g.map(|v| v * weights.pixel)).collect();
        }
        let up = Upstream {
            d_points,
            d_aux,
            d_mu: bundle.d_mu.clone(),
            d_log_var: bundle.d_log_var.clone(),
        };
        let grads = self.model.backward(params, &fwd, &up)?;
        Ok((bundle, levels, grads))
    }

    /// One optimizer step on a random batch.
    pub fn step(&self, state: &mut TrainState, train: &[TrainItem]) -> Result<LogRow> {
        if train.is_empty() {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        let start = Instant::now();
        let it = state.iteration;
        let sched = self.cfg.schedule.weights_at(it, self.cfg.iterations)?;
        let batch = self.batch_size_at(it);
        let mut rng = self.iteration_rng(it);
        let dz = self.model.config.latent_dim;
        let mut grads = state.params.zeros_like();
        let mut bundles = Vec::with_capacity(batch);
        let mut level_chamfer: Vec<f64> = Vec::new();
        for _ in 0..batch {
            let item = &train[rng.random_range(0..train.len())];
            let eps: Vec<f64> = (0..dz)
                .map(|_| {
                    let e: f64 = rng.sample(StandardNormal);
                    if self.cfg.sample_latent {
                        e
                    } else {
                        0.0
                    }
                })
                .collect();
            let (bundle, levels, g) = self.sample_gradient(&state.params, item, &sched.weights, Some(&eps))?;
            grads.add_scaled(&g, 1.0 / batch as f64);
            level_chamfer.resize(levels.len(), 0.0);
            for (a, v) in level_chamfer.iter_mut().zip(levels) {
                *a += v / batch as f64;
            }
            bundles.push(bundle);
        }
        let loss = mean_bundle(&bundles);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at iteration {it} ({LOSS_CSV_HEADER}: {})",
                loss.csv_row(it)
            )));
        }
        adam_step(&mut state.params, &grads, &mut state.adam, &self.cfg.adam)
            .map_err(|e| Error::NonFinite(format!("iteration {it}: {e}")))?;
        state.iteration += 1;
        Ok(LogRow {
            iteration: it,
            batch_size: batch,
            loss,
            level_chamfer,
            val_chamfer: None,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }

    /// Mean finest-level Chamfer at the posterior mean over annotated
    /// samples.
    pub fn validate(&self, params: &Params, items: &[TrainItem]) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0;
        for item in items.iter().filter(|i| i.targets.any_annotated()) {
            let pts = self.model.predict(params, &item.input)?;
            let (v, _) = level_chamfer(&pts[0], self.topology.finest(), &item.targets, 1.0)?;
            sum += v;
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidInput("validation set has no annotated samples".into()));
        }
        Ok(sum / count as f64)
    }

    /// Runs from `state.iteration` to the configured total.
    pub fn run(
        &self,
        state: TrainState,
        train: &[TrainItem],
        val: &[TrainItem],
        on_row: impl FnMut(&LogRow),
    ) -> Result<TrainOutcome> {
        self.run_until(state, self.cfg.iterations, train, val, on_row)
    }

    /// Runs from `state.iteration` up to `stop` (capped at the configured
    /// total). Schedules always refer to the full run.
    pub fn run_until(
        &self,
        mut state: TrainState,
        stop: usize,
        train: &[TrainItem],
        val: &[TrainItem],
        mut on_row: impl FnMut(&LogRow),
    ) -> Result<TrainOutcome> {
        let total = self.cfg.iterations;
        let stop = stop.min(total);
        let mut best: Option<(usize, f64, Params)> = None;
        let started = Instant::now();
        while state.iteration < stop {
            let mut row = self.step(&mut state, train)?;
            let done = state.iteration;
            let check = !val.is_empty() && ((self.cfg.val_every > 0 && done % self.cfg.val_every == 0) || done == stop);
            if check {
                let v = self.validate(&state.params, val)?;
                row.val_chamfer = Some(v);
                if best.as_ref().is_none_or(|b| v < b.1) {
                    best = Some((done, v, state.params.clone()));
                }
                info!("iteration {done}/{total}: train loss {:.5}, val chamfer {v:.6}", row.loss.total);
            } else if done % 100 == 0 {
                debug!("iteration {done}/{total}: loss {:.5}", row.loss.total);
            }
            row.wall_time = started.elapsed().as_secs_f64();
            on_row(&row);
        }
        let schedule = self.cfg.schedule.weights_at(state.iteration, total)?;
        let (best_iteration, best_val_chamfer, best_params) = match best {
            Some((i, v, p)) => (i, Some(v), p),
            None => (state.iteration, None, state.params.clone()),
        };
        Ok(TrainOutcome {
            best_params,
            best_iteration,
            best_val_chamfer,
            state,
            schedule,
        })
    }
}

/// Convenience wrapper: trains from `params` with a fresh optimizer.
pub fn train_population(
    model: &Model,
    topology: &GraphTopology,
    params: Params,
    train: &[TrainItem],
    val: &[TrainItem],
    cfg: &TrainConfig,
    on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    Trainer::new(model, topology, cfg.clone())?.run(TrainState::new(params), train, val, on_row)
}
