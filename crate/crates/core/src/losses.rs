//! Training losses with analytic gradients.
//!
//! All point coordinates are normalized so that the longer image side maps
//! to 1; [`to_pixels`] and [`to_normalized`] convert.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, sub};
use crate::grid::{BinaryMask, Image, Point};
use crate::topology::{EdgeTensor, Level};

pub const DICE_SMOOTH: f64 = 1.0;
pub const BCE_CLAMP: f64 = 1e-7;
/// Default cap on ground-truth contour points per organ.
pub const MAX_TRUTH_POINTS: usize = 4096;

pub fn to_pixels(points: &[Point], side: f64) -> Vec<Point> {
    points.iter().map(|p| [p[0] * side, p[1] * side]).collect()
}

pub fn to_normalized(points: &[Point], side: f64) -> Vec<Point> {
    points.iter().map(|p| [p[0] / side, p[1] / side]).collect()
}

/// Keeps at most `max` points using a uniform stride.
pub fn cap_points(points: &[Point], max: usize) -> Vec<Point> {
    if points.len() <= max || max == 0 {
        return points.to_vec();
    }
    (0..max).map(|k| points[k * points.len() / max]).collect()
}

/// Organ point lists taken from node positions along each organ cycle.
pub fn gather_organs(nodes: &[Point], level: &Level) -> Vec<Vec<Point>> {
    level
        .organ_cycles
        .iter()
        .map(|cyc| cyc.iter().map(|&v| nodes[v]).collect())
        .collect()
}

/// Sums per-organ point gradients back onto nodes.
pub fn scatter_organs(per_organ: &[Vec<Point>], level: &Level) -> Vec<Point> {
    let mut out = vec![[0.0; 2]; level.num_nodes];
    for (cyc, grads) in level.organ_cycles.iter().zip(per_organ) {
        for (&v, g) in cyc.iter().zip(grads) {
            out[v][0] += g[0];
            out[v][1] += g[1];
        }
    }
    out
}

fn add_scaled(dst: &mut [Point], src: &[Point], s: f64) {
    for (d, g) in dst.iter_mut().zip(src) {
        d[0] += s * g[0];
        d[1] += s * g[1];
    }
}

/// Symmetric Chamfer distance between two point sets and its gradient with
/// respect to `p`. Nearest-neighbour ties go to the lowest index.
pub fn chamfer_distance(p: &[Point], g: &[Point]) -> (f64, Vec<Point>) {
    let mut grad = vec![[0.0; 2]; p.len()];
    if p.is_empty() || g.is_empty() {
        return (0.0, grad);
    }
    let nearest = |q: Point, set: &[Point]| -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, s) in set.iter().enumerate() {
            let d = sub(q, *s);
            let d2 = dot(d, d);
            if d2 < best.1 {
                best = (k, d2);
            }
        }
        best
    };
    let (np, ng) = (p.len() as f64, g.len() as f64);
    let mut value = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        let (k, d2) = nearest(pi, g);
        value += d2 / np;
        grad[i][0] += 2.0 * (pi[0] - g[k][0]) / np;
        grad[i][1] += 2.0 * (pi[1] - g[k][1]) / np;
    }
    for &gk in g {
        let (i, d2) = nearest(gk, p);
        value += d2 / ng;
        grad[i][0] += 2.0 * (p[i][0] - gk[0]) / ng;
        grad[i][1] += 2.0 * (p[i][1] - gk[1]) / ng;
    }
    (value, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChamferTerm {
    pub value: f64,
    /// Per-organ gradient with respect to the predicted points.
    pub grad: Vec<Vec<Point>>,
}

/// Sum of per-organ Chamfer distances over annotated organs.
pub fn chamfer_loss(predicted: &[Vec<Point>], truth: &[Vec<Point>], annotated: &[bool]) -> Result<ChamferTerm> {
    if predicted.len() != truth.len() || predicted.len() != annotated.len() {
        return Err(Error::Shape("chamfer inputs disagree on organ count".into()));
    }
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(predicted.len());
    for (o, (p, g)) in predicted.iter().zip(truth).enumerate() {
        if !annotated[o] {
            grad.push(vec![[0.0; 2]; p.len()]);
            continue;
        }
        if g.is_empty() || p.is_empty() {
            return Err(Error::InvalidInput(format!("annotated organ index {o} has no points")));
        }
        let (v, dg) = chamfer_distance(p, g);
        value += v;
        grad.push(dg);
    }
    Ok(ChamferTerm { value, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelTerm {
    pub value: f64,
    pub dice: f64,
    pub bce: f64,
    /// Per-organ gradient with respect to the soft masks.
    pub grad: Vec<Image>,
}

/// Soft Dice loss plus clamped BCE for one organ, with the mask gradient.
pub fn dice_bce(soft: &Image, truth: &BinaryMask) -> Result<(f64, f64, Image)> {
    if !soft.same_shape(truth) {
        return Err(Error::Shape(format!(
            "soft mask {}x{} vs truth {}x{}",
            soft.width(),
            soft.height(),
            truth.width(),
            truth.height()
        )));
    }
    let n = soft.data().len() as f64;
    let (mut inter, mut sum) = (0.0, 0.0);
    let mut bce = 0.0;
    for (&s, &g) in soft.data().iter().zip(truth.data()) {
        let g = if g { 1.0 } else { 0.0 };
        inter += s * g;
        sum += s + g;
        let c = s.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        bce -= g * c.ln() + (1.0 - g) * (1.0 - c).ln();
    }
    bce /= n;
    let den = sum + DICE_SMOOTH;
    let num = 2.0 * inter + DICE_SMOOTH;
    let dice = 1.0 - num / den;
    let grad = soft.data().iter().zip(truth.data()).map(|(&s, &g)| {
        let g = if g { 1.0 } else { 0.0 };
        let d_dice = -(2.0 * g * den - num) / (den * den);
        let d_bce = if s > BCE_CLAMP && s < 1.0 - BCE_CLAMP {
            (-g / s + (1.0 - g) / (1.0 - s)) / n
        } else {
            0.0
        };
        d_dice + d_bce
    });
    Ok((dice, bce, Image::from_vec(soft.width(), soft.height(), grad.collect())))
}

/// Mean of `dice + bce` over annotated organs.
pub fn pixel_loss(soft: &[Image], truth: &[BinaryMask], annotated: &[bool]) -> Result<PixelTerm> {
    if soft.len() != truth.len() || soft.len() != annotated.len() {
        return Err(Error::Shape("pixel loss inputs disagree on organ count".into()));
    }
    let count = annotated.iter().filter(|a| **a).count();
    let mut term = PixelTerm {
        value: 0.0,
        dice: 0.0,
        bce: 0.0,
        grad: soft.iter().map(|s| Image::new(s.width(), s.height())).collect(),
    };
    if count == 0 {
        return Ok(term);
    }
    let scale = 1.0 / count as f64;
    for o in (0..soft.len()).filter(|&o| annotated[o]) {
        let (d, b, g) = dice_bce(&soft[o], &truth[o])?;
        term.dice += scale * d;
        term.bce += scale * b;
        term.grad[o] = g.map(|v| v * scale);
    }
    term.value = term.dice + term.bce;
    Ok(term)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlTerm {
    pub value: f64,
    pub d_mu: Vec<f64>,
    pub d_log_var: Vec<f64>,
}

pub fn kl_loss(mu: &[f64], log_var: &[f64]) -> Result<KlTerm> {
    if mu.len() != log_var.len() {
        return Err(Error::Shape("mu and log_var lengths differ".into()));
    }
    let value = -0.5
        * mu
            .iter()
            .zip(log_var)
            .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
            .sum::<f64>();
    Ok(KlTerm {
        value,
        d_mu: mu.to_vec(),
        d_log_var: log_var.iter().map(|lv| 0.5 * (lv.exp() - 1.0)).collect(),
    })
}

/// How the edge terms treat the mean edge length and organ weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeGradient {
    /// Mean edge length and organ weights are constants.
    #[default]
    StopGradient,
    /// Exact derivative of the full expression.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTerms {
    pub uniform: f64,
    pub elastic: f64,
    pub curvature: f64,
    pub mean_lengths: Vec<f64>,
    pub perimeters: Vec<f64>,
    pub weights: Vec<f64>,
    pub d_uniform: Vec<Point>,
    pub d_elastic: Vec<Point>,
    pub d_curvature: Vec<Point>,
}

/// Uniform, elastic and curvature regularizers over all organs of `et`,
/// evaluated on node positions.
pub fn edge_regularizers(nodes: &[Point], et: &EdgeTensor, mode: EdgeGradient) -> EdgeTerms {
    let organs = et.num_organs();
    let mut out = EdgeTerms {
        uniform: 0.0,
        elastic: 0.0,
        curvature: 0.0,
        mean_lengths: vec![0.0; organs],
        perimeters: vec![0.0; organs],
        weights: vec![0.0; organs],
        d_uniform: vec![[0.0; 2]; nodes.len()],
        d_elastic: vec![[0.0; 2]; nodes.len()],
        d_curvature: vec![[0.0; 2]; nodes.len()],
    };
    if organs == 0 {
        return out;
    }
    let edges: Vec<Vec<(usize, usize)>> = (0..organs).map(|o| et.organ_edges(o).collect()).collect();
    let length = |(i, j): (usize, usize)| {
        let e = sub(nodes[i], nodes[j]);
        dot(e, e).sqrt()
    };
    for o in 0..organs {
        out.perimeters[o] = edges[o].iter().map(|&e| length(e)).sum();
        out.mean_lengths[o] = out.perimeters[o] / edges[o].len().max(1) as f64;
    }
    let (argmax, pmax) = out
        .perimeters
        .iter()
        .enumerate()
        .fold((0, 0.0), |best, (o, &p)| if p > best.1 { (o, p) } else { best });
    for o in 0..organs {
        if out.perimeters[o] == 0.0 {
            warn!("organ index {o} has zero perimeter; its edge weight is 0");
        } else {
            out.weights[o] = out.perimeters[o] / pmax;
        }
    }

    let inv_o = 1.0 / organs as f64;
    // organ-level raw terms, kept for the weight derivative in full mode
    let mut raw = vec![[0.0; 3]; organs];
    for o in 0..organs {
        let w = out.weights[o];
        let ne = edges[o].len().max(1) as f64;
        let ebar = out.mean_lengths[o];
        let mut d_ebar = 0.0;
        for &(i, j) in &edges[o] {
            let e = sub(nodes[i], nodes[j]);
            let l = dot(e, e).sqrt();
            raw[o][1] += dot(e, e) / ne;
            let s = 2.0 * w * inv_o / ne;
            out.d_elastic[i][0] += s * e[0];
            out.d_elastic[i][1] += s * e[1];
            out.d_elastic[j][0] -= s * e[0];
            out.d_elastic[j][1] -= s * e[1];
            if ebar > 0.0 {
                let u = (l - ebar) / ebar;
                raw[o][0] += u * u / ne;
                d_ebar += -2.0 * u * l / (ebar * ebar) / ne;
                if l > 0.0 {
                    let s = w * inv_o * 2.0 * u / (ebar * ne * l);
                    out.d_uniform[i][0] += s * e[0];
                    out.d_uniform[i][1] += s * e[1];
                    out.d_uniform[j][0] -= s * e[0];
                    out.d_uniform[j][1] -= s * e[1];
                }
            }
        }
        let pairs = &et.consecutive_pairs[o];
        let np = pairs.len().max(1) as f64;
        for &((i, j), (_, k)) in pairs {
            let v = [
                nodes[i][0] - 2.0 * nodes[j][0] + nodes[k][0],
                nodes[i][1] - 2.0 * nodes[j][1] + nodes[k][1],
            ];
            raw[o][2] += dot(v, v) / np;
            let s = 2.0 * w * inv_o / np;
            for (node, c) in [(i, 1.0), (j, -2.0), (k, 1.0)] {
                out.d_curvature[node][0] += s * c * v[0];
                out.d_curvature[node][1] += s * c * v[1];
            }
        }
        if mode == EdgeGradient::Full && ebar > 0.0 {
            // mean edge length depends on every edge of the organ
            let s = w * inv_o * d_ebar / ne;
            add_length_grad(&mut out.d_uniform, nodes, &edges[o], s);
        }
    }
    for o in 0..organs {
        out.uniform += inv_o * out.weights[o] * raw[o][0];
        out.elastic += inv_o * out.weights[o] * raw[o][1];
        out.curvature += inv_o * out.weights[o] * raw[o][2];
    }
    if mode == EdgeGradient::Full && pmax > 0.0 {
        // w_o = P_o / P_max: d/dP_o = 1/P_max (o != argmax), d/dP_max = -P_o/P_max^2
        for (t, grad) in [
            (0, &mut out.d_uniform),
            (1, &mut out.d_elastic),
            (2, &mut out.d_curvature),
        ] {
            let mut d_pmax = 0.0;
            for o in (0..organs).filter(|&o| o != argmax) {
                add_length_grad(grad, nodes, &edges[o], inv_o * raw[o][t] / pmax);
                d_pmax -= inv_o * raw[o][t] * out.perimeters[o] / (pmax * pmax);
            }
            add_length_grad(grad, nodes, &edges[argmax], d_pmax);
        }
    }
    out
}

/// Adds `s * d(sum of edge lengths)/d nodes`.
fn add_length_grad(grad: &mut [Point], nodes: &[Point], edges: &[(usize, usize)], s: f64) {
    for &(i, j) in edges {
        let e = sub(nodes[i], nodes[j]);
        let l = dot(e, e).sqrt();
        if l > 0.0 {
            grad[i][0] += s * e[0] / l;
            grad[i][1] += s * e[1] / l;
            grad[j][0] -= s * e[0] / l;
            grad[j][1] -= s * e[1] / l;
        }
    }
}

/// Scalar loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub chamfer: f64,
    pub pixel: f64,
    pub kl: f64,
    pub uniform: f64,
    pub elastic: f64,
    pub curvature: f64,
}

impl LossWeights {
    pub const ZERO: Self = Self {
        chamfer: 0.0,
        pixel: 0.0,
        kl: 0.0,
        uniform: 0.0,
        elastic: 0.0,
        curvature: 0.0,
    };
}

impl Default for LossWeights {
    /// The weights at the start of training.
    fn default() -> Self {
        Self {
            chamfer: 10.0,
            pixel: 1.0,
            kl: 1e-6,
            uniform: 1e-6,
            elastic: 300.0,
            curvature: 250.0,
        }
    }
}

/// Loss parts for one sample.
pub struct LossParts<'a> {
    pub chamfer: &'a ChamferTerm,
    pub pixel: Option<&'a PixelTerm>,
    pub kl: Option<&'a KlTerm>,
    pub edge: &'a EdgeTerms,
    /// Level used to scatter organ Chamfer gradients onto nodes.
    pub level: &'a Level,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub chamfer: f64,
    pub pixel: f64,
    pub kld: f64,
    pub uniform: f64,
    pub elastic: f64,
    pub curvature: f64,
    pub edge: f64,
    pub total: f64,
    pub weights: LossWeights,
    pub mean_lengths: Vec<f64>,
    pub perimeters: Vec<f64>,
    pub organ_weights: Vec<f64>,
    /// d total / d node positions, excluding the path through soft masks.
    pub d_points: Vec<Point>,
    pub d_masks: Vec<Image>,
    pub d_mu: Vec<f64>,
    pub d_log_var: Vec<f64>,
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> LossBundle {
    let edge = w.uniform * parts.edge.uniform + w.elastic * parts.edge.elastic + w.curvature * parts.edge.curvature;
    let pixel = parts.pixel.map_or(0.0, |p| p.value);
    let kld = parts.kl.map_or(0.0, |k| k.value);
    let total = w.chamfer * parts.chamfer.value + w.pixel * pixel + w.kl * kld + edge;
    let mut d_points = vec![[0.0; 2]; parts.level.num_nodes];
    add_scaled(&mut d_points, &scatter_organs(&parts.chamfer.grad, parts.level), w.chamfer);
    add_scaled(&mut d_points, &parts.edge.d_uniform, w.uniform);
    add_scaled(&mut d_points, &parts.edge.d_elastic, w.elastic);
    add_scaled(&mut d_points, &parts.edge.d_curvature, w.curvature);
    LossBundle {
        chamfer: parts.chamfer.value,
        pixel,
        kld,
        uniform: parts.edge.uniform,
        elastic: parts.edge.elastic,
        curvature: parts.edge.curvature,
        edge,
        total,
        weights: *w,
        mean_lengths: parts.edge.mean_lengths.clone(),
        perimeters: parts.edge.perimeters.clone(),
        organ_weights: parts.edge.weights.clone(),
        d_points,
        d_masks: parts
            .pixel
            .map(|p| p.grad.iter().map(|g| g.map(|v| v * w.pixel)).collect())
            .unwrap_or_default(),
        d_mu: parts.kl.map(|k| k.d_mu.iter().map(|v| v * w.kl).collect()).unwrap_or_default(),
        d_log_var: parts
            .kl
            .map(|k| k.d_log_var.iter().map(|v| v * w.kl).collect())
            .unwrap_or_default(),
    }
}

pub const LOSS_CSV_HEADER: &str =
    "iteration,chamfer,pixel,kld,uniform,elastic,curvature,edge,total,lambda_c,lambda_p,lambda_k,alpha,beta,gamma";

impl LossBundle {
    pub fn csv_row(&self, iteration: usize) -> String {
        let w = &self.weights;
        format!(
            "{iteration},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.chamfer,
            self.pixel,
            self.kld,
            self.uniform,
            self.elastic,
            self.curvature,
            self.edge,
            self.total,
            w.chamfer,
            w.pixel,
            w.kl,
            w.uniform,
            w.elastic,
            w.curvature
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.chamfer,
            self.pixel,
            self.kld,
            self.uniform,
            self.elastic,
            self.curvature,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::build_independent;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn chamfer_examples() {
        let p = vec![[0.5, 0.25], [0.1, 0.9]];
        assert_eq!(chamfer_distance(&p, &p).0, 0.0);
        let (v, _) = chamfer_distance(&[[0.0, 0.0]], &[[1.0, 0.0], [0.0, 1.0]]);
        assert!(close(v, 2.0, 1e-15));
        let t = chamfer_loss(
            &[vec![[0.0, 0.0]], vec![[0.3, 0.3]]],
            &[vec![[1.0, 0.0]], vec![]],
            &[true, false],
        )
        .unwrap();
        assert!(close(t.value, 2.0, 1e-15));
        assert_eq!(t.grad[1], vec![[0.0, 0.0]]);
        assert!(chamfer_loss(&[vec![[0.0, 0.0]]], &[vec![]], &[true]).is_err());
    }

    #[test]
    fn chamfer_symmetry_scale_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = |n: usize| -> Vec<Point> { (0..n).map(|_| [rng.random(), rng.random()]).collect() };
        let (p, g) = (pts(9), pts(14));
        let a = chamfer_distance(&p, &g).0;
        assert!(close(a, chamfer_distance(&g, &p).0, 1e-14));
        let scale = |s: &[Point]| s.iter().map(|q| [3.0 * q[0], 3.0 * q[1]]).collect::<Vec<_>>();
        assert!(close(chamfer_distance(&scale(&p), &scale(&g)).0, 9.0 * a, 1e-12));
        let mut rev = g.clone();
        rev.reverse();
        assert!(close(chamfer_distance(&p, &rev).0, a, 1e-14));
    }

    fn binary(v: &[u8], w: usize) -> BinaryMask {
        BinaryMask::from_vec(w, v.len() / w, v.iter().map(|&b| b == 1).collect())
    }

    #[test]
    fn pixel_loss_examples() {
        let gt = binary(&[1, 1, 0, 0, 1, 0, 0, 0, 1], 3);
        let perfect = gt.map(|&b| if b { 1.0 } else { 0.0 });
        let t = pixel_loss(&[perfect.clone()], &[gt.clone()], &[true]).unwrap();
        assert!(t.dice < 1e-12 && t.bce < 1e-6, "{t:?}");
        let inverse = perfect.map(|v| 1.0 - v);
        let t = pixel_loss(&[inverse], &[gt.clone()], &[true]).unwrap();
        // smoothing keeps it just under 1: 1 - 1 / (9 + 1)
        assert!(close(t.dice, 0.9, 1e-12));
        let half = perfect.map(|_| 0.5);
        let t = pixel_loss(&[half], &[gt.clone()], &[true]).unwrap();
        assert!(close(t.bce, std::f64::consts::LN_2, 1e-12));
        let t = pixel_loss(&[perfect.clone(), perfect], &[gt.clone(), gt], &[false, false]).unwrap();
        assert_eq!(t.value, 0.0);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_loss(&[0.0], &[0.0]).unwrap().value, 0.0);
        assert!(close(kl_loss(&[1.0], &[0.0]).unwrap().value, 0.5, 1e-15));
        let v = kl_loss(&[0.0], &[4f64.ln()]).unwrap().value;
        assert!(close(v, -0.5 * (1.0 + 4f64.ln() - 4.0), 1e-15));
        assert!(close(v, 0.8069, 1e-4));
    }

    fn one_organ(n: usize) -> (EdgeTensor, Level) {
        let t = build_independent(&[(1, n)], 1).unwrap();
        (t.edge_tensor(0), t.levels[0].clone())
    }

    #[test]
    fn edge_terms_on_square_and_rectangle() {
        let (et, _) = one_organ(4);
        let sq = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let e = edge_regularizers(&sq, &et, EdgeGradient::StopGradient);
        assert!(close(e.uniform, 0.0, 1e-15));
        assert!(close(e.elastic, 1.0, 1e-15));
        assert!(close(e.curvature, 2.0, 1e-15));
        let rect = vec![[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [0.0, 1.0]];
        let e = edge_regularizers(&rect, &et, EdgeGradient::StopGradient);
        assert!(close(e.uniform, 1.0 / 9.0, 1e-15));
    }

    #[test]
    fn straight_chain_has_no_curvature() {
        let line: Vec<Point> = (0..6).map(|k| [k as f64, 2.0 * k as f64]).collect();
        let (et, _) = one_organ(6);
        let e = edge_regularizers(&line, &et, EdgeGradient::StopGradient);
        // only the two wrap-around pairs bend
        let interior: f64 = et.consecutive_pairs[0]
            .iter()
            .filter(|((i, _), (_, k))| i < k && k - i == 2)
            .map(|&((i, j), (_, k))| {
                let v = [
                    line[i][0] - 2.0 * line[j][0] + line[k][0],
                    line[i][1] - 2.0 * line[j][1] + line[k][1],
                ];
                dot(v, v)
            })
            .sum();
        assert_eq!(interior, 0.0);
        assert!(e.curvature > 0.0);
    }

    #[test]
    fn organ_weights_follow_perimeters() {
        let t = build_independent(&[(1, 4), (2, 4)], 1).unwrap();
        let et = t.edge_tensor(0);
        let mut nodes: Vec<Point> = vec![[0.0, 0.0], [2.5, 0.0], [2.5, 2.5], [0.0, 2.5]];
        nodes.extend([[0.0, 0.0], [1.25, 0.0], [1.25, 1.25], [0.0, 1.25]]);
        let e = edge_regularizers(&nodes, &et, EdgeGradient::StopGradient);
        assert_eq!(e.perimeters, vec![10.0, 5.0]);
        assert_eq!(e.weights, vec![1.0, 0.5]);
    }

    #[test]
    fn scaling_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (et, _) = one_organ(9);
        let pts: Vec<Point> = (0..9).map(|_| [rng.random(), rng.random()]).collect();
        let big: Vec<Point> = pts.iter().map(|p| [2.0 * p[0], 2.0 * p[1]]).collect();
        let a = edge_regularizers(&pts, &et, EdgeGradient::StopGradient);
        let b = edge_regularizers(&big, &et, EdgeGradient::StopGradient);
        assert!(close(b.elastic, 4.0 * a.elastic, 1e-12));
        assert!(close(b.curvature, 4.0 * a.curvature, 1e-12));
        assert!(close(b.uniform, a.uniform, 1e-12));
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn zero_perimeter_gets_zero_weight() {
        let (et, _) = one_organ(4);
        let e = edge_regularizers(&[[0.3, 0.3]; 4], &et, EdgeGradient::Full);
        assert_eq!(e.weights, vec![0.0]);
        assert_eq!(e.uniform, 0.0);
        assert!(e.d_uniform.iter().all(|g| g[0].is_finite() && g[1].is_finite()));
    }

    #[test]
    fn total_loss_linearity() {
        let (et, level) = one_organ(4);
        let sq = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let edge = edge_regularizers(&sq, &et, EdgeGradient::StopGradient);
        let chamfer = chamfer_loss(&[vec![[0.0, 0.0]; 1]], &[vec![[1.0, 0.0], [0.0, 1.0]]], &[true]).unwrap();
        let ch4 = ChamferTerm {
            value: chamfer.value,
            grad: vec![vec![chamfer.grad[0][0], [0.0; 2], [0.0; 2], [0.0; 2]]],
        };
        let parts = LossParts {
            chamfer: &ch4,
            pixel: None,
            kl: None,
            edge: &edge,
            level: &level,
        };
        let zero = total_loss(&parts, &LossWeights::ZERO);
        assert_eq!(zero.total, 0.0);
        assert!(zero.d_points.iter().all(|g| *g == [0.0, 0.0]));
        let only_chamfer = LossWeights {
            chamfer: 1.0,
            ..LossWeights::ZERO
        };
        assert!(close(total_loss(&parts, &only_chamfer).total, 2.0, 1e-15));
        let d = LossWeights::default();
        assert_eq!((d.chamfer, d.pixel, d.elastic, d.curvature), (10.0, 1.0, 300.0, 250.0));
        let row = total_loss(&parts, &d).csv_row(3);
        assert_eq!(row.split(',').count(), LOSS_CSV_HEADER.split(',').count());
    }

    #[test]
    fn full_edge_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = build_independent(&[(1, 7), (2, 5)], 1).unwrap();
        let et = t.edge_tensor(0);
        let nodes: Vec<Point> = (0..12).map(|_| [rng.random(), rng.random()]).collect();
        let total = |p: &[Point]| {
            let e = edge_regularizers(p, &et, EdgeGradient::Full);
            [e.uniform, e.elastic, e.curvature]
        };
        let e = edge_regularizers(&nodes, &et, EdgeGradient::Full);
        let h = 1e-6;
        for i in 0..nodes.len() {
            for c in 0..2 {
                let mut p = nodes.clone();
                p[i][c] += h;
                let fp = total(&p);
                p[i][c] -= 2.0 * h;
                let fm = total(&p);
                for (t, g) in [&e.d_uniform, &e.d_elastic, &e.d_curvature].iter().enumerate() {
                    let fd = (fp[t] - fm[t]) / (2.0 * h);
                    assert!((fd - g[i][c]).abs() <= 1e-6 * fd.abs().max(1e-3), "term {t} node {i}: {fd} vs {}", g[i][c]);
                }
            }
        }
    }

    #[test]
    fn truth_cap_uses_uniform_stride() {
        let pts: Vec<Point> = (0..10).map(|k| [k as f64, 0.0]).collect();
        let c = cap_points(&pts, 4);
        assert_eq!(c.iter().map(|p| p[0] as usize).collect::<Vec<_>>(), vec![0, 2, 5, 7]);
        assert_eq!(cap_points(&pts, 20).len(), 10);
    }
}
