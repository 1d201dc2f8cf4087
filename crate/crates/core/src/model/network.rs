use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::layers::*;
use super::params::Params;
use super::{ModelConfig, ReadoutInit, Variant};
use crate::error::{Error, Result};
use crate::grid::{Image, Point};
use crate::topology::{GraphTopology, SparseMatrix};

/// Parameter block indices.
#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<(usize, usize)>,
    mu: (usize, usize),
    log_var: (usize, usize),
    proj: (usize, usize),
    /// Per level: Chebyshev layers, then readout `(weight, per-node bias)`.
    cheb: Vec<Vec<(usize, usize)>>,
    readout: Vec<(usize, usize)>,
    refine: Option<((usize, usize), (usize, usize))>,
    aux: Vec<(usize, usize)>,
    aux_final: Option<(usize, usize)>,
    aux_head: Option<(usize, usize)>,
}

/// A model bound to a topology. Parameters live outside in [`Params`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub organs: usize,
    nodes: Vec<usize>,
    laplacians: Vec<SparseMatrix>,
    up: Vec<SparseMatrix>,
    up_t: Vec<SparseMatrix>,
    down: Vec<SparseMatrix>,
    organ_cycles: Vec<Vec<usize>>,
    atlas: Option<Vec<Point>>,
    topology_json: String,
    layout: Layout,
    template: Params,
}

#[derive(Debug, Clone)]
struct ChebCache {
    n_in: usize,
    basis: Vec<Vec<f64>>,
    pre: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LevelCache {
    cheb: Vec<ChebCache>,
    h: Vec<f64>,
    coords: Vec<Point>,
}

#[derive(Debug, Clone)]
struct AuxCache {
    /// Per skip stage `l`: concatenated input and pre-activation.
    stages: Vec<(FeatureMap, FeatureMap)>,
    final_in: FeatureMap,
    final_pre: FeatureMap,
    final_out: FeatureMap,
}

/// Forward pass with everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct Forward {
    input: FeatureMap,
    enc_pre: Vec<FeatureMap>,
    /// Encoder stage outputs, finest first.
    pub stages: Vec<FeatureMap>,
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    pub eps: Vec<f64>,
    pub z: Vec<f64>,
    proj_pre: Vec<f64>,
    levels: Vec<LevelCache>,
    refine: Option<(ChebCache, Vec<f64>, Vec<f64>)>,
    aux: Option<AuxCache>,
    /// Auxiliary maps `A_l` (Dual only), finest first.
    pub aux_maps: Vec<FeatureMap>,
    /// Node coordinates per level, finest first.
    pub points: Vec<Vec<Point>>,
    /// Dense per-organ masks from the auxiliary decoder (Dual only).
    pub aux_masks: Vec<Image>,
}

/// Loss gradients flowing into the model.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    /// Per level, gradient with respect to node coordinates.
    pub d_points: Vec<Vec<Point>>,
    /// Per organ, gradient with respect to the auxiliary masks.
    pub d_aux: Vec<Image>,
    pub d_mu: Vec<f64>,
    pub d_log_var: Vec<f64>,
}

fn flat_points(p: &[Point]) -> Vec<f64> {
    p.iter().flat_map(|q| [q[0], q[1]]).collect()
}

fn to_points(v: &[f64]) -> Vec<Point> {
    v.chunks(2).map(|c| [c[0], c[1]]).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn conv3(c_in: usize, c_out: usize, stride: usize) -> ConvShape {
    ConvShape {
        c_in,
        c_out,
        kernel: 3,
        stride,
        pad: 1,
    }
}

impl Model {
    pub fn new(config: ModelConfig, topology: &GraphTopology) -> Result<Self> {
        let stages = config.encoder_widths.len();
        let levels = topology.num_levels();
        if stages < 2 {
            return Err(Error::Config("at least two encoder stages required".into()));
        }
        if config.input_size == 0 || config.input_size % (1 << stages) != 0 {
            return Err(Error::Config(format!(
                "input size {} must be divisible by 2^{stages}",
                config.input_size
            )));
        }
        if levels == 0 || levels >= stages {
            return Err(Error::Config(format!(
                "{levels} graph levels need between 1 and {} encoder stages below the bottleneck",
                stages - 1
            )));
        }
        if config.cheb_order == 0 || config.cheb_layers == 0 || config.latent_dim == 0 || config.graph_width == 0 {
            return Err(Error::Config("cheb_order, cheb_layers, latent_dim and graph_width must be positive".into()));
        }
        let nodes: Vec<usize> = topology.levels.iter().map(|l| l.num_nodes).collect();
        let finest_side = config.input_size as f64;
        let mut model = Self {
            organs: topology.organs.len(),
            nodes,
            laplacians: topology.levels.iter().map(|l| l.scaled_laplacian()).collect(),
            up: topology.up.clone(),
            up_t: topology.up.iter().map(SparseMatrix::transpose).collect(),
            down: topology.down.clone(),
            organ_cycles: topology.levels[0].organ_cycles.clone(),
            atlas: topology
                .atlas_positions
                .as_ref()
                .map(|p| p[0].iter().map(|q| [q[0] / finest_side, q[1] / finest_side]).collect()),
            topology_json: topology.to_json()?,
            layout: Layout {
                enc: vec![],
                mu: (0, 0),
                log_var: (0, 0),
                proj: (0, 0),
                cheb: vec![],
                readout: vec![],
                refine: None,
                aux: vec![],
                aux_final: None,
                aux_head: None,
            },
            template: Params::default(),
            config,
        };
        model.template = model.declare();
        Ok(model)
    }

    pub fn num_levels(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes_per_level(&self) -> &[usize] {
        &self.nodes
    }

    fn bottleneck_len(&self) -> usize {
        let s = self.config.encoder_widths.len();
        let side = self.config.input_size >> s;
        self.config.encoder_widths[s - 1] * side * side
    }

    /// Level `l` input width of the first Chebyshev layer.
    fn level_in_width(&self, l: usize) -> usize {
        if l + 1 == self.num_levels() {
            self.config.graph_width
        } else {
            self.config.graph_width + self.config.encoder_widths[l + 1] + 2
        }
    }

    /// Declares every block (zero-filled) and fills the layout.
    fn declare(&mut self) -> Params {
        let c = self.config.clone();
        let mut p = Params::default();
        let mut lay = self.layout.clone();
        let mut c_in = 1;
        for (s, &w) in c.encoder_widths.iter().enumerate() {
            let shape = conv3(c_in, w, 2);
            let wi = p.push(format!("enc.{s}.weight"), &[w, c_in, 3, 3], vec![0.0; shape.weight_len()]);
            let bi = p.push(format!("enc.{s}.bias"), &[w], vec![0.0; w]);
            lay.enc.push((wi, bi));
            c_in = w;
        }
        let flat = self.bottleneck_len();
        let dz = c.latent_dim;
        lay.mu = (
            p.push("mu.weight", &[dz, flat], vec![0.0; dz * flat]),
            p.push("mu.bias", &[dz], vec![0.0; dz]),
        );
        lay.log_var = (
            p.push("log_var.weight", &[dz, flat], vec![0.0; dz * flat]),
            p.push("log_var.bias", &[dz], vec![0.0; dz]),
        );
        let f = c.graph_width;
        let coarse = self.nodes[self.num_levels() - 1];
        lay.proj = (
            p.push("proj.weight", &[coarse * f, dz], vec![0.0; coarse * f * dz]),
            p.push("proj.bias", &[coarse * f], vec![0.0; coarse * f]),
        );
        let k = c.cheb_order;
        for l in 0..self.num_levels() {
            let mut layers = vec![];
            for j in 0..c.cheb_layers {
                let n_in = if j == 0 { self.level_in_width(l) } else { f };
                layers.push((
                    p.push(format!("dec.{l}.cheb.{j}.theta"), &[k, n_in, f], vec![0.0; k * n_in * f]),
                    p.push(format!("dec.{l}.cheb.{j}.bias"), &[f], vec![0.0; f]),
                ));
            }
            lay.cheb.push(layers);
            let n = self.nodes[l];
            lay.readout.push((
                p.push(format!("dec.{l}.readout.weight"), &[f, 2], vec![0.0; 2 * f]),
                p.push(format!("dec.{l}.readout.bias"), &[n, 2], vec![0.0; 2 * n]),
            ));
        }
        if c.refine {
            let n_in = f + c.encoder_widths[0] + 2;
            lay.refine = Some((
                (
                    p.push("refine.cheb.theta", &[k, n_in, f], vec![0.0; k * n_in * f]),
                    p.push("refine.cheb.bias", &[f], vec![0.0; f]),
                ),
                (
                    p.push("refine.readout.weight", &[f, 2], vec![0.0; 2 * f]),
                    p.push("refine.readout.bias", &[2], vec![0.0; 2]),
                ),
            ));
        }
        if c.variant == Variant::Dual {
            let s = c.encoder_widths.len();
            for l in (0..s - 1).rev() {
                let (cin, cout) = (c.encoder_widths[l + 1] + c.encoder_widths[l], c.encoder_widths[l]);
                let wi = p.push(format!("aux.{l}.weight"), &[cout, cin, 3, 3], vec![0.0; cout * cin * 9]);
                let bi = p.push(format!("aux.{l}.bias"), &[cout], vec![0.0; cout]);
                lay.aux.push((wi, bi));
            }
            lay.aux.reverse();
            let w0 = c.encoder_widths[0];
            let cin = w0 + 1;
            lay.aux_final = Some((
                p.push("aux.final.weight", &[w0, cin, 3, 3], vec![0.0; w0 * cin * 9]),
                p.push("aux.final.bias", &[w0], vec![0.0; w0]),
            ));
            let o = self.organs;
            lay.aux_head = Some((
                p.push("aux.head.weight", &[o, w0, 1, 1], vec![0.0; o * w0]),
                p.push("aux.head.bias", &[o], vec![0.0; o]),
            ));
        }
        self.layout = lay;
        p
    }

    /// Zero-filled parameters with the model's layout.
    pub fn zero_params(&self) -> Params {
        self.template.clone()
    }

    /// Random initial parameters.
    pub fn init_params(&self, rng: &mut impl Rng) -> Params {
        let mut p = self.zero_params();
        let fill = |p: &mut Params, idx: usize, std: f64, rng: &mut dyn rand::RngCore| {
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut p.blocks[idx].data {
                *v = normal.sample(rng);
            }
        };
        let lay = &self.layout;
        let c = &self.config;
        let mut c_in = 1;
        for (s, &(wi, _)) in lay.enc.iter().enumerate() {
            fill(&mut p, wi, (2.0 / (9 * c_in) as f64).sqrt(), rng);
            c_in = c.encoder_widths[s];
        }
        let flat = self.bottleneck_len() as f64;
        fill(&mut p, lay.mu.0, (1.0 / flat).sqrt(), rng);
        fill(&mut p, lay.log_var.0, 0.01 * (1.0 / flat).sqrt(), rng);
        p.blocks[lay.log_var.1].data.fill(c.log_var_bias);
        fill(&mut p, lay.proj.0, (2.0 / c.latent_dim as f64).sqrt(), rng);
        fill(&mut p, lay.proj.1, 0.1, rng);
        let k = c.cheb_order as f64;
        for layers in &lay.cheb {
            for &(ti, _) in layers {
                let shape = &p.blocks[ti].shape;
                let (n_in, n_out) = (shape[1] as f64, shape[2] as f64);
                fill(&mut p, ti, (2.0 / (k * (n_in + n_out))).sqrt(), rng);
            }
        }
        for &(wi, _) in &lay.readout {
            fill(&mut p, wi, 0.01, rng);
        }
        if let Some(((ti, _), _)) = lay.refine {
            let shape = &p.blocks[ti].shape;
            let (n_in, n_out) = (shape[1] as f64, shape[2] as f64);
            fill(&mut p, ti, (2.0 / (k * (n_in + n_out))).sqrt(), rng);
        }
        for &(wi, _) in lay.aux.iter().chain(&lay.aux_final).chain(&lay.aux_head) {
            let shape = p.blocks[wi].shape.clone();
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            fill(&mut p, wi, (2.0 / fan_in).sqrt(), rng);
        }
        self.set_templates(&mut p, &self.default_template());
        p
    }

    /// Finest-level starting positions implied by the readout init option.
    pub fn default_template(&self) -> Vec<Point> {
        match self.config.readout_init {
            ReadoutInit::Constant(v) => vec![[v, v]; self.nodes[0]],
            ReadoutInit::Circle => match &self.atlas {
                Some(a) => a.clone(),
                None => self.circle_template(&vec![([0.5, 0.5], self.config.template_radius); self.organs]),
            },
        }
    }

    /// Clockwise circles per organ from `(center, radius)` pairs, node 0 at
    /// the top.
    pub fn circle_template(&self, circles: &[(Point, f64)]) -> Vec<Point> {
        let mut out = vec![[0.5, 0.5]; self.nodes[0]];
        for (cyc, &(c, r)) in self.organ_cycles.iter().zip(circles) {
            let n = cyc.len() as f64;
            for (k, &v) in cyc.iter().enumerate() {
                let t = -std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * k as f64 / n;
                out[v] = [c[0] + r * t.cos(), c[1] + r * t.sin()];
            }
        }
        out
    }

    /// Sets the per-node readout biases from finest-level positions, pooled
    /// to coarser levels with the down matrices.
    pub fn set_templates(&self, params: &mut Params, finest: &[Point]) {
        let mut pts = finest.to_vec();
        for l in 0..self.num_levels() {
            if l > 0 {
                pts = self.down[l - 1].apply_points(&pts);
            }
            params.blocks[self.layout.readout[l].1].data = flat_points(&pts);
        }
    }

    /// SHA-256 over the model config and topology.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            config: &'a ModelConfig,
            topology: &'a str,
        }
        let json = serde_json::to_string(&Hashed {
            config: &self.config,
            topology: &self.topology_json,
        })
        .expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_params(&self, params: &Params) -> Result<()> {
        if params.same_layout(&self.template) {
            Ok(())
        } else {
            Err(Error::Shape("parameters do not match the model layout".into()))
        }
    }

    /// Encoder stages and latent heads: `(stages, mu, log_var)`.
    pub fn encode(&self, params: &Params, image: &Image) -> Result<(Vec<FeatureMap>, Vec<f64>, Vec<f64>)> {
        let f = self.forward(params, image, None)?;
        Ok((f.stages, f.mu, f.log_var))
    }

    /// Posterior-mean prediction: node coordinates per level.
    pub fn predict(&self, params: &Params, image: &Image) -> Result<Vec<Vec<Point>>> {
        Ok(self.forward(params, image, None)?.points)
    }

    /// Full forward pass. `eps = None` uses the posterior mean.
    pub fn forward(&self, params: &Params, image: &Image, eps: Option<&[f64]>) -> Result<Forward> {
        self.check_params(params)?;
        let c = &self.config;
        if image.width() != c.input_size || image.height() != c.input_size {
            return Err(Error::Shape(format!(
                "input {}x{} does not match configured size {}",
                image.width(),
                image.height(),
                c.input_size
            )));
        }
        let b = |i: usize| params.blocks[i].data.as_slice();
        let lay = &self.layout;
        let input = FeatureMap {
            channels: 1,
            height: c.input_size,
            width: c.input_size,
            data: image.data().to_vec(),
        };
        let mut enc_pre = Vec::new();
        let mut stages: Vec<FeatureMap> = Vec::new();
        for (s, &(wi, bi)) in lay.enc.iter().enumerate() {
            let x = if s == 0 { &input } else { &stages[s - 1] };
            let pre = conv2d(x, &conv3(x.channels, c.encoder_widths[s], 2), b(wi), b(bi));
            let out = FeatureMap {
                data: leaky_relu(&pre.data),
                ..pre.clone()
            };
            enc_pre.push(pre);
            stages.push(out);
        }
        let flat = &stages.last().unwrap().data;
        let mu = linear(flat, b(lay.mu.0), b(lay.mu.1));
        let log_var = linear(flat, b(lay.log_var.0), b(lay.log_var.1));
        let eps = match eps {
            Some(e) if e.len() == c.latent_dim => e.to_vec(),
            Some(e) => {
                return Err(Error::Shape(format!("eps has {} entries, latent is {}", e.len(), c.latent_dim)));
            }
            None => vec![0.0; c.latent_dim],
        };
        let z = reparameterize(&mu, &log_var, &eps);

        let (aux, aux_maps, aux_masks) = if c.variant == Variant::Dual {
            let (cache, maps, masks) = self.aux_forward(params, &input, &stages);
            (Some(cache), maps, masks)
        } else {
            (None, vec![], vec![])
        };
        let maps = if c.variant == Variant::Dual { &aux_maps } else { &stages };

        let fw = c.graph_width;
        let proj_pre = linear(&z, b(lay.proj.0), b(lay.proj.1));
        let r = self.num_levels();
        let mut levels: Vec<Option<LevelCache>> = vec![None; r];
        let mut x = leaky_relu(&proj_pre);
        let mut concat_fine = Vec::new();
        for l in (0..r).rev() {
            let mut cheb = Vec::new();
            let mut n_in = self.level_in_width(l);
            for &(ti, bi) in &lay.cheb[l] {
                let (pre, basis) = cheb_conv(&x, n_in, &self.laplacians[l], b(ti), b(bi), c.cheb_order);
                let out = leaky_relu(&pre);
                cheb.push(ChebCache {
                    n_in,
                    basis,
                    pre,
                });
                x = out;
                n_in = fw;
            }
            let h = std::mem::take(&mut x);
            let (rw, rb) = lay.readout[l];
            let mut coords = node_linear(&h, fw, b(rw), &[0.0, 0.0]);
            add_into(&mut coords, b(rb));
            let coords = to_points(&coords);
            let need_sample = l > 0 || lay.refine.is_some();
            let sampled = if need_sample { igsc_sample(&maps[l], &coords) } else { vec![] };
            let cl = maps[l].channels;
            if need_sample {
                let concat = concat_rows(&[(&h, fw), (&sampled, cl), (&flat_points(&coords), 2)], self.nodes[l]);
                if l > 0 {
                    x = self.up[l - 1].mul_rows(&concat, fw + cl + 2);
                } else {
                    concat_fine = concat;
                }
            }
            levels[l] = Some(LevelCache { cheb, h, coords });
        }
        let levels: Vec<LevelCache> = levels.into_iter().map(Option::unwrap).collect();
        let mut points: Vec<Vec<Point>> = levels.iter().map(|lc| lc.coords.clone()).collect();
        let refine = lay.refine.map(|((ti, bi), (wi, di))| {
            let n_in = fw + maps[0].channels + 2;
            let (pre, basis) = cheb_conv(&concat_fine, n_in, &self.laplacians[0], b(ti), b(bi), c.cheb_order);
            let act = leaky_relu(&pre);
            let delta = node_linear(&act, fw, b(wi), b(di));
            for (p, d) in points[0].iter_mut().zip(delta.chunks(2)) {
                p[0] += d[0];
                p[1] += d[1];
            }
            (
                ChebCache {
                    n_in,
                    basis,
                    pre,
                },
                act,
                delta,
            )
        });
        Ok(Forward {
            input,
            enc_pre,
            stages,
            mu,
            log_var,
            eps,
            z,
            proj_pre,
            levels,
            refine,
            aux,
            aux_maps,
            points,
            aux_masks,
        })
    }

    fn aux_forward(&self, params: &Params, input: &FeatureMap, stages: &[FeatureMap]) -> (AuxCache, Vec<FeatureMap>, Vec<Image>) {
        let b = |i: usize| params.blocks[i].data.as_slice();
        let lay = &self.layout;
        let widths = &self.config.encoder_widths;
        let s = widths.len();
        let mut maps: Vec<Option<FeatureMap>> = vec![None; s - 1];
        let mut caches: Vec<Option<(FeatureMap, FeatureMap)>> = vec![None; s - 1];
        let mut a = stages[s - 1].clone();
        for l in (0..s - 1).rev() {
            let cat = concat_channels(&upsample2(&a), &stages[l]);
            let (wi, bi) = lay.aux[l];
            let pre = conv2d(&cat, &conv3(cat.channels, widths[l], 1), b(wi), b(bi));
            a = FeatureMap {
                data: leaky_relu(&pre.data),
                ..pre.clone()
            };
            maps[l] = Some(a.clone());
            caches[l] = Some((cat, pre));
        }
        let final_in = concat_channels(&upsample2(&a), input);
        let (fwi, fbi) = lay.aux_final.unwrap();
        let final_pre = conv2d(&final_in, &conv3(final_in.channels, widths[0], 1), b(fwi), b(fbi));
        let final_out = FeatureMap {
            data: leaky_relu(&final_pre.data),
            ..final_pre.clone()
        };
        let (hwi, hbi) = lay.aux_head.unwrap();
        let head_shape = ConvShape {
            c_in: widths[0],
            c_out: self.organs,
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        let logits = conv2d(&final_out, &head_shape, b(hwi), b(hbi));
        let side = input.width;
        let masks = (0..self.organs)
            .map(|o| Image::from_vec(side, side, logits.plane(o).iter().map(|&v| sigmoid(v)).collect()))
            .collect();
        (
            AuxCache {
                stages: caches.into_iter().map(Option::unwrap).collect(),
                final_in,
                final_pre,
                final_out,
            },
            maps.into_iter().map(Option::unwrap).collect(),
            masks,
        )
    }

    /// Gradient of the loss with respect to every parameter block.
    pub fn backward(&self, params: &Params, fwd: &Forward, up: &Upstream) -> Result<Params> {
        self.check_params(params)?;
        let c = &self.config;
        let lay = &self.layout;
        let r = self.num_levels();
        if up.d_points.len() != r || up.d_points.iter().zip(&self.nodes).any(|(d, &n)| d.len() != n) {
            return Err(Error::Shape("point gradients do not match the level sizes".into()));
        }
        let mut g = self.zero_params();
        let p = |i: usize| params.blocks[i].data.as_slice();
        let fw = c.graph_width;
        let dual = c.variant == Variant::Dual;
        let maps = if dual { &fwd.aux_maps } else { &fwd.stages };
        let mut d_maps: Vec<FeatureMap> = maps.iter().map(FeatureMap::zeros_like).collect();

        // finest-level refinement
        let mut d_concat: Option<Vec<f64>> = None;
        if let (Some(((ti, bi), (wi, di))), Some((cc, act, _))) = (lay.refine, &fwd.refine) {
            let d_delta = flat_points(&up.d_points[0]);
            let (gw, gd) = two_mut(&mut g, wi, di);
            let mut d_act = node_linear_backward(act, fw, p(wi), &d_delta, gw, gd);
            leaky_relu_backward(&cc.pre, &mut d_act);
            let (gt, gb) = two_mut(&mut g, ti, bi);
            d_concat = Some(cheb_conv_backward(&cc.basis, cc.n_in, &self.laplacians[0], p(ti), &d_act, gt, gb));
        }

        let mut d_z = vec![0.0; c.latent_dim];
        for l in 0..r {
            let lc = &fwd.levels[l];
            let n = self.nodes[l];
            let mut d_coords = flat_points(&up.d_points[l]);
            let mut d_h = vec![0.0; n * fw];
            if let Some(dc) = d_concat.take() {
                let cl = maps[l].channels;
                let parts = split_rows(&dc, &[fw, cl, 2], n);
                add_into(&mut d_h, &parts[0]);
                let dp = igsc_backward(&maps[l], &lc.coords, &parts[1], &mut d_maps[l]);
                add_into(&mut d_coords, &flat_points(&dp));
                add_into(&mut d_coords, &parts[2]);
            }
            let (rw, rb) = lay.readout[l];
            {
                let (gw, gb) = two_mut(&mut g, rw, rb);
                let mut scratch = [0.0; 2];
                let dh = node_linear_backward(&lc.h, fw, p(rw), &d_coords, gw, &mut scratch);
                add_into(gb, &d_coords);
                add_into(&mut d_h, &dh);
            }
            let mut d_x = d_h;
            for (j, cc) in lc.cheb.iter().enumerate().rev() {
                let (ti, bi) = lay.cheb[l][j];
                leaky_relu_backward(&cc.pre, &mut d_x);
                let (gt, gb) = two_mut(&mut g, ti, bi);
                d_x = cheb_conv_backward(&cc.basis, cc.n_in, &self.laplacians[l], p(ti), &d_x, gt, gb);
            }
            if l + 1 < r {
                let cl = maps[l + 1].channels;
                d_concat = Some(self.up_t[l].mul_rows(&d_x, fw + cl + 2));
            } else {
                leaky_relu_backward(&fwd.proj_pre, &mut d_x);
                let (gw, gb) = two_mut(&mut g, lay.proj.0, lay.proj.1);
                d_z = linear_backward(&fwd.z, p(lay.proj.0), &d_x, gw, gb);
            }
        }

        // reparameterization
        let mut d_mu = d_z.clone();
        let mut d_lv: Vec<f64> = d_z
            .iter()
            .zip(fwd.log_var.iter().zip(&fwd.eps))
            .map(|(dz, (lv, e))| dz * 0.5 * (0.5 * lv).exp() * e)
            .collect();
        if !up.d_mu.is_empty() {
            add_into(&mut d_mu, &up.d_mu);
        }
        if !up.d_log_var.is_empty() {
            add_into(&mut d_lv, &up.d_log_var);
        }

        let s = c.encoder_widths.len();
        let mut d_stages: Vec<FeatureMap> = fwd.stages.iter().map(FeatureMap::zeros_like).collect();
        if dual {
            self.aux_backward(params, fwd, up, d_maps, &mut d_stages, &mut g)?;
        } else {
            for (ds, dm) in d_stages.iter_mut().zip(&d_maps) {
                ds.add_assign(dm);
            }
        }
        let flat = &fwd.stages[s - 1].data;
        {
            let (gw, gb) = two_mut(&mut g, lay.mu.0, lay.mu.1);
            let d = linear_backward(flat, p(lay.mu.0), &d_mu, gw, gb);
            add_into(&mut d_stages[s - 1].data, &d);
        }
        {
            let (gw, gb) = two_mut(&mut g, lay.log_var.0, lay.log_var.1);
            let d = linear_backward(flat, p(lay.log_var.0), &d_lv, gw, gb);
            add_into(&mut d_stages[s - 1].data, &d);
        }
        for st in (0..s).rev() {
            let mut d = std::mem::replace(&mut d_stages[st], FeatureMap::zeros(0, 0, 0));
            leaky_relu_backward(&fwd.enc_pre[st].data, &mut d.data);
            let x = if st == 0 { &fwd.input } else { &fwd.stages[st - 1] };
            let (wi, bi) = lay.enc[st];
            let shape = conv3(x.channels, c.encoder_widths[st], 2);
            let (gw, gb) = two_mut(&mut g, wi, bi);
            let dx = conv2d_backward(x, &shape, p(wi), &d, gw, gb, st > 0);
            if let Some(dx) = dx {
                d_stages[st - 1].add_assign(&dx);
            }
        }
        Ok(g)
    }

    fn aux_backward(
        &self,
        params: &Params,
        fwd: &Forward,
        up: &Upstream,
        mut d_maps: Vec<FeatureMap>,
        d_stages: &mut [FeatureMap],
        g: &mut Params,
    ) -> Result<()> {
        let p = |i: usize| params.blocks[i].data.as_slice();
        let lay = &self.layout;
        let widths = &self.config.encoder_widths;
        let s = widths.len();
        let cache = fwd.aux.as_ref().ok_or_else(|| Error::Config("auxiliary decoder not run".into()))?;
        let side = self.config.input_size;
        let mut d_logits = FeatureMap::zeros(self.organs, side, side);
        if !up.d_aux.is_empty() {
            if up.d_aux.len() != self.organs {
                return Err(Error::Shape("aux gradient organ count".into()));
            }
            for (o, (dm, m)) in up.d_aux.iter().zip(&fwd.aux_masks).enumerate() {
                let plane = &mut d_logits.data[o * side * side..(o + 1) * side * side];
                for ((d, &gv), &sv) in plane.iter_mut().zip(dm.data()).zip(m.data()) {
                    *d = gv * sv * (1.0 - sv);
                }
            }
        }
        let (hwi, hbi) = lay.aux_head.unwrap();
        let head_shape = ConvShape {
            c_in: widths[0],
            c_out: self.organs,
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        let (gw, gb) = two_mut(g, hwi, hbi);
        let mut d_final = conv2d_backward(&cache.final_out, &head_shape, p(hwi), &d_logits, gw, gb, true).unwrap();
        leaky_relu_backward(&cache.final_pre.data, &mut d_final.data);
        let (fwi, fbi) = lay.aux_final.unwrap();
        let (gw, gb) = two_mut(g, fwi, fbi);
        let shape = conv3(cache.final_in.channels, widths[0], 1);
        let d_in = conv2d_backward(&cache.final_in, &shape, p(fwi), &d_final, gw, gb, true).unwrap();
        let (d_up, _) = split_channels(&d_in, widths[0]);
        d_maps[0].add_assign(&upsample2_backward(&d_up));
        for l in 0..s - 1 {
            let mut d = std::mem::replace(&mut d_maps[l], FeatureMap::zeros(0, 0, 0));
            let (cat, pre) = &cache.stages[l];
            leaky_relu_backward(&pre.data, &mut d.data);
            let (wi, bi) = lay.aux[l];
            let (gw, gb) = two_mut(g, wi, bi);
            let d_cat = conv2d_backward(cat, &conv3(cat.channels, widths[l], 1), p(wi), &d, gw, gb, true).unwrap();
            let (d_up, d_skip) = split_channels(&d_cat, widths[l + 1]);
            d_stages[l].add_assign(&d_skip);
            let d_prev = upsample2_backward(&d_up);
            if l + 1 < s - 1 {
                d_maps[l + 1].add_assign(&d_prev);
            } else {
                d_stages[s - 1].add_assign(&d_prev);
            }
        }
        Ok(())
    }
}

/// `z = mu + exp(log_var / 2) * eps`.
pub fn reparameterize(mu: &[f64], log_var: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(log_var.iter().zip(eps))
        .map(|(m, (lv, e))| m + (0.5 * lv).exp() * e)
        .collect()
}

/// Mutable access to two distinct gradient blocks.
fn two_mut(g: &mut Params, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b, "weight block precedes its bias");
    let (lo, hi) = g.blocks.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}
